"""Joint-angle extraction from landmark series.

Angles come from the three-point arccos formula on 2D pixel coordinates.
Frames are gated by landmark visibility, the exercise-mapped joint is tried
first on both sides, and a coverage score decides fallbacks to a dominant
joint when the mapped signal is too occluded.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    BodySide,
    ExerciseKind,
    LandmarkSeries,
    LEFT_ELBOW,
    LEFT_HIP,
    LEFT_SHOULDER,
    LEFT_WRIST,
    RIGHT_ELBOW,
    RIGHT_HIP,
    RIGHT_SHOULDER,
    RIGHT_WRIST,
)
from .errors import DegenerateGeometryError, UnusableVideoError

DEFAULT_VISIBILITY_THRESHOLD = 0.5
DEFAULT_MAPPED_COVERAGE = 0.6  # below this the mapped signal counts as incomplete
MIN_USABLE_COVERAGE = 0.1


@dataclass(frozen=True)
class JointTriple:
    """Proximal / center / distal landmark indices for one sided joint."""

    proximal: int
    center: int
    distal: int
    side: BodySide
    name: str

    def __post_init__(self):
        if len({self.proximal, self.center, self.distal}) != 3:
            raise ValueError(f"{self.name}: landmark indices must be distinct")


LEFT_ELBOW_TRIPLE = JointTriple(LEFT_SHOULDER, LEFT_ELBOW, LEFT_WRIST, BodySide.LEFT, "left_elbow")
RIGHT_ELBOW_TRIPLE = JointTriple(RIGHT_SHOULDER, RIGHT_ELBOW, RIGHT_WRIST, BodySide.RIGHT, "right_elbow")
LEFT_SHOULDER_TRIPLE = JointTriple(LEFT_HIP, LEFT_SHOULDER, LEFT_ELBOW, BodySide.LEFT, "left_shoulder")
RIGHT_SHOULDER_TRIPLE = JointTriple(RIGHT_HIP, RIGHT_SHOULDER, RIGHT_ELBOW, BodySide.RIGHT, "right_shoulder")

JOINT_TRIPLES: dict[tuple[str, BodySide], JointTriple] = {
    ("elbow", BodySide.LEFT): LEFT_ELBOW_TRIPLE,
    ("elbow", BodySide.RIGHT): RIGHT_ELBOW_TRIPLE,
    ("shoulder", BodySide.LEFT): LEFT_SHOULDER_TRIPLE,
    ("shoulder", BodySide.RIGHT): RIGHT_SHOULDER_TRIPLE,
}

# Fallback companion on the same side (wrist excluded: too noisy).
NEARBY_JOINT = {"elbow": "shoulder", "shoulder": "elbow"}


class SignalSource(enum.Enum):
    MAPPED = "mapped"
    DOMINANT = "dominant"
    FALLBACK_SCALED = "fallback_scaled"
    FALLBACK_BLENDED = "fallback_blended"


@dataclass(frozen=True)
class AngleSeries:
    """Joint-angle trajectory; invalid samples carry NaN angles."""

    timestamps: np.ndarray
    angles: np.ndarray  # degrees, NaN where invalid
    valid: np.ndarray  # bool mask
    joint: JointTriple
    fps: float
    source_mode: SignalSource = SignalSource.MAPPED

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        a = np.asarray(self.angles, dtype=float)
        v = np.asarray(self.valid, dtype=bool)
        if not (t.shape == a.shape == v.shape) or t.ndim != 1:
            raise ValueError("timestamps, angles and valid must be 1-D and same length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        for arr in (t, a, v):
            arr.flags.writeable = False
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "angles", a)
        object.__setattr__(self, "valid", v)

    @property
    def side(self) -> BodySide:
        return self.joint.side

    @property
    def coverage(self) -> float:
        if len(self.valid) == 0:
            return 0.0
        return float(np.count_nonzero(self.valid)) / len(self.valid)

    def __len__(self) -> int:
        return len(self.timestamps)

    def with_samples(self, angles: np.ndarray, valid: np.ndarray, source_mode: SignalSource | None = None) -> "AngleSeries":
        return AngleSeries(
            timestamps=self.timestamps.copy(),
            angles=angles,
            valid=valid,
            joint=self.joint,
            fps=self.fps,
            source_mode=source_mode or self.source_mode,
        )


def joint_angle(a, b, c) -> float:
    """Angle at ``b`` in degrees between limb vectors to ``a`` and ``c``.

    The cosine argument is clamped to [-1, 1] so near-collinear geometry
    never produces NaN.
    """
    ax, ay = float(a[0]) - float(b[0]), float(a[1]) - float(b[1])
    cx, cy = float(c[0]) - float(b[0]), float(c[1]) - float(b[1])
    na = math.hypot(ax, ay)
    nc = math.hypot(cx, cy)
    if na == 0.0 or nc == 0.0:
        raise DegenerateGeometryError("zero-length limb vector")
    cos = (ax * cx + ay * cy) / (na * nc)
    cos = max(-1.0, min(1.0, cos))
    return math.degrees(math.acos(cos))


def _angles_vectorized(pa: np.ndarray, pb: np.ndarray, pc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame angles for stacked points; returns (degrees, nondegenerate mask)."""
    u = pa - pb
    w = pc - pb
    nu = np.hypot(u[:, 0], u[:, 1])
    nw = np.hypot(w[:, 0], w[:, 1])
    ok = (nu > 0) & (nw > 0)
    cos = np.zeros(len(pa))
    np.divide(u[:, 0] * w[:, 0] + u[:, 1] * w[:, 1], nu * nw, out=cos, where=ok)
    cos = np.clip(cos, -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    return ang, ok


def angle_series(
    series: LandmarkSeries,
    joint: JointTriple,
    visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD,
    source_mode: SignalSource = SignalSource.MAPPED,
) -> AngleSeries:
    """One sample per frame; valid iff all three landmarks clear the threshold
    and the geometry is non-degenerate."""
    if not (0.0 < visibility_threshold < 1.0):
        raise ValueError("visibility threshold must lie in (0, 1)")
    lm = series.landmark_array
    pa, pb, pc = (lm[:, i, :2] for i in (joint.proximal, joint.center, joint.distal))
    vis = lm[:, (joint.proximal, joint.center, joint.distal), 2]
    angles, nondegenerate = _angles_vectorized(pa, pb, pc)
    valid = np.all(vis >= visibility_threshold, axis=1) & nondegenerate
    angles = np.where(valid, angles, np.nan)
    return AngleSeries(
        timestamps=series.timestamps,
        angles=angles,
        valid=valid,
        joint=joint,
        fps=series.fps,
        source_mode=source_mode,
    )


def _amplitude(s: AngleSeries) -> float:
    vals = s.angles[s.valid]
    if len(vals) < 2:
        return 0.0
    return float(np.percentile(vals, 95) - np.percentile(vals, 5))


def _pick(candidates: list[AngleSeries]) -> AngleSeries:
    """Highest coverage; ties break to larger P95-P5 amplitude, then Left."""
    def key(s: AngleSeries):
        return (-s.coverage, -_amplitude(s), 0 if s.side is BodySide.LEFT else 1)

    return min(candidates, key=key)


def select_signal(
    series: LandmarkSeries,
    exercise: ExerciseKind | None = None,
    visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD,
    mapped_coverage_threshold: float = DEFAULT_MAPPED_COVERAGE,
) -> AngleSeries:
    """Pick the angle signal for a video and infer the exercising body side.

    The exercise-mapped joint wins when either side reaches the coverage
    threshold; otherwise every candidate joint competes on coverage alone
    (``DOMINANT`` mode). Raises :class:`UnusableVideoError` when everything
    is essentially occluded.
    """
    exercise = exercise if exercise is not None else series.exercise
    mapped = [
        angle_series(series, JOINT_TRIPLES[(exercise.focal_joint, side)], visibility_threshold)
        for side in (BodySide.LEFT, BodySide.RIGHT)
    ]
    best_mapped = _pick(mapped)
    if best_mapped.coverage >= mapped_coverage_threshold:
        return best_mapped

    candidates = [
        angle_series(series, triple, visibility_threshold, SignalSource.DOMINANT)
        for triple in JOINT_TRIPLES.values()
    ]
    best = _pick(candidates)
    if best.coverage < MIN_USABLE_COVERAGE:
        raise UnusableVideoError(
            f"{series.video_id}: best joint coverage {best.coverage:.3f} below "
            f"{MIN_USABLE_COVERAGE}; video too occluded to analyze"
        )
    return best
