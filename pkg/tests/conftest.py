import numpy as np
import pytest

from romkit.core import (
    ExerciseKind,
    LandmarkFrame,
    LandmarkSeries,
    NUM_LANDMARKS,
    RomCondition,
    STANDARD_EXERCISES,
)


def random_landmark_series(rng: np.random.Generator, n_frames: int = 5, fps: float = 30.0) -> LandmarkSeries:
    """Random but canonical-valued series (coordinates on the 6-dp grid)."""
    frames = []
    for i in range(n_frames):
        lm = np.round(
            np.column_stack(
                [
                    rng.uniform(0, 1920, NUM_LANDMARKS),
                    rng.uniform(0, 1080, NUM_LANDMARKS),
                    rng.uniform(0, 1, NUM_LANDMARKS),
                ]
            ),
            6,
        )
        frames.append(LandmarkFrame(frame_index=i, timestamp=round(i / fps, 6), landmarks=lm))
    exercise = list(STANDARD_EXERCISES.values())[int(rng.integers(len(STANDARD_EXERCISES)))]
    return LandmarkSeries(
        video_id=f"vid{rng.integers(1000)}",
        participant_id=f"P{rng.integers(30):02d}",
        exercise=exercise,
        rom_condition=RomCondition.PROM if rng.random() < 0.5 else RomCondition.FROM,
        fps=fps,
        frames=frames,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
