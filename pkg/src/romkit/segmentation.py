"""Repetition detection on smoothed joint-angle series.

Troughs (angular minima) with sufficient topographic prominence bracket
candidate repetitions; thresholds adapt to each clip's robust amplitude and
autocorrelation cadence inside conservative floors and ceilings. When the
primary joint is unreliable, rescaled or visibility-blended signals from a
nearby joint are tried and the most cadence-plausible option wins.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks

from .core import BodySide, LandmarkSeries
from .errors import EvaluationJoinError, SegmentationFailureError
from .kinematics import (
    AngleSeries,
    JOINT_TRIPLES,
    NEARBY_JOINT,
    SignalSource,
    angle_series,
)
from .signal import SmoothingConfig, condition, _valid_segments


@dataclass(frozen=True)
class DetectionConfig:
    min_inter_trough: float = 2.00  # seconds, hard floor between troughs
    min_phase_duration: float = 0.30  # seconds, per concentric/eccentric phase
    min_rom: float = 10.0  # degrees
    prominence_low: float = 5.0  # degrees, adaptive prominence floor
    prominence_high: float = 10.0  # degrees, adaptive prominence ceiling
    cadence_min: float = 0.5  # seconds, autocorrelation search window
    cadence_max: float = 15.0
    amplitude_fraction: float = 0.2  # of robust amplitude, before clamping

    def __post_init__(self):
        values = (
            self.min_inter_trough,
            self.min_phase_duration,
            self.min_rom,
            self.prominence_low,
            self.prominence_high,
            self.cadence_min,
            self.cadence_max,
            self.amplitude_fraction,
        )
        if any(v <= 0 for v in values):
            raise ValueError("all detection thresholds must be positive")
        if self.prominence_low > self.prominence_high:
            raise ValueError("prominence_low must not exceed prominence_high")
        if self.cadence_min >= self.cadence_max:
            raise ValueError("cadence search range must be non-empty")


@dataclass(frozen=True)
class ResolvedThresholds:
    """DetectionConfig with the adaptive quantities pinned for one series."""

    prominence: float
    min_inter_trough: float
    min_rom: float
    min_phase_duration: float


@dataclass(frozen=True)
class CadenceEstimate:
    period: float  # seconds
    confidence: float  # [0, 1]


@dataclass(frozen=True)
class Repetition:
    start_time: float
    end_time: float
    start_angle: float
    end_angle: float
    peak_angle: float
    trough_angle: float
    rom: float
    duration: float
    concentric_duration: float
    eccentric_duration: float
    split_time: float


@dataclass(frozen=True)
class EvaluationReport:
    n_videos: int
    side_accuracy: float
    mean_abs_deviation: float
    within_two_fraction: float
    per_video: tuple = field(default_factory=tuple)


def _frame_interval(series: AngleSeries) -> float:
    if len(series) > 1:
        return float(np.median(np.diff(series.timestamps)))
    return 1.0 / series.fps


def estimate_cadence(series: AngleSeries, cfg: DetectionConfig | None = None) -> CadenceEstimate:
    """Dominant repetition period from the mean-removed autocorrelation.

    Invalid samples contribute nothing; lag products are renormalized by the
    number of overlapping valid pairs so the estimate is unbiased in lag.
    """
    cfg = cfg or DetectionConfig()
    midpoint = 0.5 * (cfg.cadence_min + cfg.cadence_max)
    dt = _frame_interval(series)
    mask = series.valid.astype(float)
    n_valid = int(mask.sum())
    if n_valid * dt < 4.0 or n_valid < 8:
        return CadenceEstimate(period=midpoint, confidence=0.0)

    x = np.where(series.valid, series.angles, 0.0)
    mean = x.sum() / n_valid
    v = np.where(series.valid, series.angles - mean, 0.0)

    n = len(v)
    raw = np.correlate(v, v, mode="full")[n - 1 :]
    counts = np.correlate(mask, mask, mode="full")[n - 1 :]
    if counts[0] < 2 or raw[0] <= 0:
        return CadenceEstimate(period=midpoint, confidence=0.0)

    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(counts >= 8, raw / counts, np.nan) / (raw[0] / counts[0])

    lo = max(1, int(np.ceil(cfg.cadence_min / dt)))
    hi = min(n - 2, int(np.floor(cfg.cadence_max / dt)))
    if hi <= lo:
        return CadenceEstimate(period=midpoint, confidence=0.0)

    peaks: list[tuple[int, float]] = []
    for k in range(lo, hi + 1):
        rk = r[k]
        if not np.isfinite(rk) or rk <= 0:
            continue
        left = r[k - 1] if np.isfinite(r[k - 1]) else -np.inf
        right = r[k + 1] if np.isfinite(r[k + 1]) else -np.inf
        if rk >= left and rk >= right:
            peaks.append((k, float(rk)))
    if not peaks:
        return CadenceEstimate(period=midpoint, confidence=0.0)
    best_val = max(val for _, val in peaks)
    # period multiples tie at the same height on clean signals; take the
    # fundamental (earliest near-maximal peak)
    lag, val = next(p for p in peaks if p[1] >= 0.95 * best_val)
    return CadenceEstimate(period=lag * dt, confidence=min(1.0, max(0.0, val)))


def adaptive_thresholds(
    series: AngleSeries,
    cadence: CadenceEstimate,
    cfg: DetectionConfig | None = None,
) -> ResolvedThresholds:
    """Resolve prominence and trough spacing for one clip inside the configured bounds."""
    cfg = cfg or DetectionConfig()
    vals = series.angles[series.valid]
    amplitude = float(np.percentile(vals, 95) - np.percentile(vals, 5)) if len(vals) >= 2 else 0.0
    prominence = float(
        np.clip(cfg.amplitude_fraction * amplitude, cfg.prominence_low, cfg.prominence_high)
    )
    distance = cfg.min_inter_trough
    if cadence.confidence >= 0.5:
        distance = max(cfg.min_inter_trough, 0.5 * cadence.period)
    return ResolvedThresholds(
        prominence=prominence,
        min_inter_trough=distance,
        min_rom=cfg.min_rom,
        min_phase_duration=cfg.min_phase_duration,
    )


def _enforce_min_distance(order: np.ndarray, depth: np.ndarray, times: np.ndarray, min_dist: float) -> np.ndarray:
    """Greedy conflict resolution across segments: deeper troughs win."""
    keep = np.ones(len(order), dtype=bool)
    by_depth = np.argsort(depth, kind="stable")  # ascending angle = deepest first
    for idx in by_depth:
        if not keep[idx]:
            continue
        for j in range(len(order)):
            if j != idx and keep[j] and abs(times[j] - times[idx]) < min_dist:
                keep[j] = False
    return keep


def _find_troughs(series: AngleSeries, resolved: ResolvedThresholds) -> list[int]:
    """Trough indices with the prominence and spacing constraints applied."""
    dt = _frame_interval(series)
    dist_samples = max(1, int(np.ceil(resolved.min_inter_trough / dt)))
    troughs: list[int] = []
    for start, end in _valid_segments(series.valid):
        if end - start + 1 < 3:
            continue
        seg = series.angles[start : end + 1]
        idx, _ = find_peaks(-seg, prominence=resolved.prominence, distance=dist_samples)
        troughs.extend(int(i) + start for i in idx)
    if len(troughs) > 1:
        arr = np.array(sorted(troughs))
        keep = _enforce_min_distance(
            arr, series.angles[arr], series.timestamps[arr], resolved.min_inter_trough
        )
        troughs = [int(i) for i in arr[keep]]
    return sorted(troughs)


def _refine_extremum_time(x: np.ndarray, t: np.ndarray, i: int) -> float:
    """Sub-frame extremum position via a parabola through three samples;
    removes the half-frame discretization bias of argmin/argmax."""
    if i <= 0 or i >= len(x) - 1:
        return float(t[i])
    left, mid, right = x[i - 1], x[i], x[i + 1]
    if not (np.isfinite(left) and np.isfinite(right)):
        return float(t[i])
    denom = left - 2.0 * mid + right
    if denom == 0.0:
        return float(t[i])
    offset = max(-0.5, min(0.5, 0.5 * (left - right) / denom))
    dt = t[i + 1] - t[i] if i + 1 < len(t) else t[i] - t[i - 1]
    return float(t[i] + offset * dt)


def detect_repetitions(
    series: AngleSeries,
    cfg: DetectionConfig | None = None,
    lengthening_increases_angle: bool = True,
) -> list[Repetition]:
    """Trough-to-trough repetitions surviving the ROM and phase-duration gates.

    Each consecutive trough pair within one contiguous valid segment brackets
    a candidate; the internal maximum splits it into phases, assigned to
    concentric/eccentric by the exercise's lengthening direction. Extremum
    times are refined to sub-frame resolution, with trough spacing clamped so
    it never drops below the resolved inter-trough distance.
    """
    cfg = cfg or DetectionConfig()
    resolved = adaptive_thresholds(series, estimate_cadence(series, cfg), cfg)
    troughs = _find_troughs(series, resolved)
    if len(troughs) < 2:
        return []

    segments = _valid_segments(series.valid)

    def segment_of(i: int) -> int:
        for k, (s, e) in enumerate(segments):
            if s <= i <= e:
                return k
        return -1

    t = series.timestamps
    x = series.angles
    refined = [_refine_extremum_time(x, t, i) for i in troughs]
    for k in range(1, len(refined)):
        refined[k] = max(refined[k], refined[k - 1] + resolved.min_inter_trough)

    reps: list[Repetition] = []
    for (i, j), (rt_start, rt_end) in zip(
        zip(troughs[:-1], troughs[1:]), zip(refined[:-1], refined[1:])
    ):
        if segment_of(i) != segment_of(j):
            continue  # a repetition cannot span an unfilled occlusion gap
        window = x[i : j + 1]
        peak_idx = i + int(np.argmax(window[1:-1])) + 1
        peak = float(x[peak_idx])
        trough = float(window.min())
        rom = peak - trough
        if rom < resolved.min_rom:
            continue
        dt = t[1] - t[0] if len(t) > 1 else 1.0 / series.fps
        split = _refine_extremum_time(x, t, peak_idx)
        split = max(rt_start + 0.5 * dt, min(rt_end - 0.5 * dt, split))
        rise = split - rt_start
        fall = rt_end - split
        if rise < resolved.min_phase_duration or fall < resolved.min_phase_duration:
            continue
        # Rising half means the angle grows; that is the eccentric (lengthening)
        # phase exactly when lengthening increases the mapped angle.
        ecc, con = (rise, fall) if lengthening_increases_angle else (fall, rise)
        reps.append(
            Repetition(
                start_time=rt_start,
                end_time=rt_end,
                start_angle=float(x[i]),
                end_angle=float(x[j]),
                peak_angle=peak,
                trough_angle=trough,
                rom=rom,
                duration=rt_end - rt_start,
                concentric_duration=con,
                eccentric_duration=ecc,
                split_time=split,
            )
        )
    return reps


def _affine_rescale(target: AngleSeries, source: AngleSeries) -> AngleSeries | None:
    """Source angles mapped so their P5-P95 band matches the target's on
    frames where both are valid."""
    both = target.valid & source.valid
    if both.sum() < 2:
        return None
    p5t, p95t = np.percentile(target.angles[both], [5, 95])
    p5s, p95s = np.percentile(source.angles[both], [5, 95])
    span_s = p95s - p5s
    if span_s <= 0:
        return None
    alpha = (p95t - p5t) / span_s
    mid_t, mid_s = 0.5 * (p5t + p95t), 0.5 * (p5s + p95s)
    scaled = mid_t + alpha * (source.angles - mid_s)
    scaled = np.where(source.valid, scaled, np.nan)
    return AngleSeries(
        timestamps=target.timestamps.copy(),
        angles=scaled,
        valid=source.valid.copy(),
        joint=target.joint,
        fps=target.fps,
        source_mode=SignalSource.FALLBACK_SCALED,
    )


def _blend(primary: AngleSeries, scaled: AngleSeries, w_primary: np.ndarray, w_nearby: np.ndarray) -> AngleSeries:
    """Per-frame convex combination weighted by each joint's minimum landmark
    visibility; frames where only one side is valid pass that side through."""
    n = len(primary)
    angles = np.full(n, np.nan)
    valid = primary.valid | scaled.valid
    both = primary.valid & scaled.valid
    wsum = w_primary + w_nearby
    safe = both & (wsum > 0)
    angles[safe] = (
        w_primary[safe] * primary.angles[safe] + w_nearby[safe] * scaled.angles[safe]
    ) / wsum[safe]
    angles[both & ~safe] = 0.5 * (primary.angles[both & ~safe] + scaled.angles[both & ~safe])
    only_p = primary.valid & ~scaled.valid
    angles[only_p] = primary.angles[only_p]
    only_s = scaled.valid & ~primary.valid
    angles[only_s] = scaled.angles[only_s]
    return AngleSeries(
        timestamps=primary.timestamps.copy(),
        angles=angles,
        valid=valid,
        joint=primary.joint,
        fps=primary.fps,
        source_mode=SignalSource.FALLBACK_BLENDED,
    )


def _median_iti(reps: list[Repetition]) -> float:
    if len(reps) == 1:
        return reps[0].duration
    starts = np.array([r.start_time for r in reps])
    return float(np.median(np.diff(np.append(starts, reps[-1].end_time))))


def fallback_signal(
    series: LandmarkSeries,
    primary: AngleSeries,
    cfg: DetectionConfig | None = None,
    smoothing: SmoothingConfig | None = None,
    visibility_threshold: float = 0.5,
    coverage_threshold: float = 0.6,
) -> AngleSeries:
    """Choose between the primary signal and nearby-joint reconstructions.

    Candidates are the primary series, the nearby same-side joint rescaled to
    the focal ROM, and a per-frame visibility-weighted blend. The candidate
    whose median inter-trough interval best agrees with its autocorrelation
    period wins; candidates with zero detected repetitions never win while
    another has any.
    """
    cfg = cfg or DetectionConfig()
    smoothing = smoothing or SmoothingConfig()
    if primary.coverage >= coverage_threshold:
        return primary

    nearby_name = NEARBY_JOINT[
        "elbow" if "elbow" in primary.joint.name else "shoulder"
    ]
    nearby_triple = JOINT_TRIPLES[(nearby_name, primary.side)]
    nearby = condition(angle_series(series, nearby_triple, visibility_threshold), smoothing)

    candidates: list[AngleSeries] = [primary]
    scaled = _affine_rescale(primary, nearby)
    if scaled is not None:
        candidates.append(scaled)
        lm = series.landmark_array
        focal_idx = (primary.joint.proximal, primary.joint.center, primary.joint.distal)
        nearby_idx = (nearby_triple.proximal, nearby_triple.center, nearby_triple.distal)
        w_primary = lm[:, focal_idx, 2].min(axis=1)
        w_nearby = lm[:, nearby_idx, 2].min(axis=1)
        candidates.append(_blend(primary, scaled, w_primary, w_nearby))

    scored: list[tuple[float, int, AngleSeries]] = []
    for rank, cand in enumerate(candidates):
        reps = detect_repetitions(cand, cfg)
        if not reps:
            continue
        cadence = estimate_cadence(cand, cfg)
        plausibility = abs(_median_iti(reps) - cadence.period) / cadence.period
        scored.append((plausibility, rank, cand))
    if not scored:
        raise SegmentationFailureError(
            f"{series.video_id}: no signal candidate produced any repetition"
        )
    scored.sort(key=lambda item: (item[0], item[1]))
    return scored[0][2]


def evaluate_against_annotations(
    predictions: dict[str, tuple[BodySide, int]],
    annotations: dict[str, tuple[BodySide, int]],
) -> EvaluationReport:
    """Side accuracy, mean absolute rep-count deviation and the +/-2 agreement
    fraction over the annotated videos."""
    missing = sorted(v for v in annotations if v not in predictions)
    if missing:
        raise EvaluationJoinError(
            f"{len(missing)} annotated videos have no prediction: {', '.join(missing)}",
            unmatched=missing,
        )
    if not annotations:
        raise EvaluationJoinError("no annotations supplied")
    rows = []
    side_hits = 0
    deviations = []
    within = 0
    for vid in sorted(annotations):
        pred_side, pred_count = predictions[vid]
        true_side, true_count = annotations[vid]
        dev = abs(pred_count - true_count)
        side_hits += pred_side is true_side
        deviations.append(dev)
        within += dev <= 2
        rows.append((vid, pred_side.value, true_side.value, pred_count, true_count, dev))
    n = len(annotations)
    return EvaluationReport(
        n_videos=n,
        side_accuracy=side_hits / n,
        mean_abs_deviation=float(np.mean(deviations)),
        within_two_fraction=within / n,
        per_video=tuple(rows),
    )


def read_annotations_csv(text: str) -> dict[str, tuple[BodySide, int]]:
    """Parse the evaluation CSV: columns video_id, side, rep_count."""
    reader = csv.DictReader(io.StringIO(text))
    required = {"video_id", "side", "rep_count"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise EvaluationJoinError(
            f"annotation CSV must have columns {sorted(required)}, got {reader.fieldnames}"
        )
    out = {}
    for row in reader:
        out[row["video_id"]] = (BodySide.parse(row["side"]), int(row["rep_count"]))
    return out
