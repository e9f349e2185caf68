"""Per-video orchestration: landmarks -> conditioned angle signal ->
repetitions -> set summaries."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .core import BodySide, LandmarkSeries
from .kinematics import AngleSeries, select_signal
from .segmentation import DetectionConfig, Repetition, detect_repetitions, fallback_signal
from .setmetrics import SetSummary, summaries_for_video, trim_repetitions
from .signal import SmoothingConfig, condition


@dataclass(frozen=True)
class VideoAnalysis:
    video_id: str
    side: BodySide
    signal: AngleSeries
    repetitions: list[Repetition]
    trimmed: list[Repetition]
    summaries: list[SetSummary]


def analyze_video(
    series: LandmarkSeries,
    smoothing: SmoothingConfig | None = None,
    detection: DetectionConfig | None = None,
    visibility_threshold: float = 0.5,
    mapped_coverage_threshold: float = 0.6,
    joint_override: str | None = None,
    sex: str = "M",
    min_reps: int = 4,
) -> VideoAnalysis:
    """Run the full single-video chain.

    Videos with fewer than ``min_reps`` detected repetitions produce no set
    summaries (too sparse to survive first/last trimming meaningfully).
    """
    smoothing = smoothing or SmoothingConfig()
    detection = detection or DetectionConfig()
    exercise = series.exercise
    if joint_override is not None:
        exercise = replace(exercise, focal_joint=joint_override)

    raw = select_signal(
        series,
        exercise,
        visibility_threshold=visibility_threshold,
        mapped_coverage_threshold=mapped_coverage_threshold,
    )
    signal = condition(raw, smoothing)
    if signal.coverage < mapped_coverage_threshold:
        signal = fallback_signal(
            series, signal, detection, smoothing, visibility_threshold,
            coverage_threshold=mapped_coverage_threshold,
        )
    reps = detect_repetitions(signal, detection, exercise.lengthening_increases_angle)
    trimmed = trim_repetitions(reps) if len(reps) >= min_reps else []
    summaries = (
        summaries_for_video(
            series.participant_id,
            exercise,
            series.rom_condition,
            signal.side,
            trimmed,
            sex=sex,
        )
        if len(trimmed) >= 2
        else []
    )
    return VideoAnalysis(
        video_id=series.video_id,
        side=signal.side,
        signal=signal,
        repetitions=reps,
        trimmed=trimmed,
        summaries=summaries,
    )
