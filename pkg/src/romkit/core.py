"""Canonical domain types and the landmark file format.

The landmark wire format (``*.landmarks.jsonl``) decouples pose extraction
from analysis: line 1 is a header object, every following line is one frame
with 33 ``[x, y, visibility]`` triples. Floats are written with 6 decimal
places so canonical files round-trip byte-exactly.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, LandmarkValidationError

SCHEMA_ID = "romkit/landmarks/v1"
NUM_LANDMARKS = 33

# Indices into the standard 33-point pose topology used downstream.
NOSE = 0
LEFT_SHOULDER, RIGHT_SHOULDER = 11, 12
LEFT_ELBOW, RIGHT_ELBOW = 13, 14
LEFT_WRIST, RIGHT_WRIST = 15, 16
LEFT_HIP, RIGHT_HIP = 23, 24


class RomCondition(enum.Enum):
    """Full vs lengthened-partial range-of-motion condition."""

    FROM = "fROM"
    PROM = "pROM"

    @classmethod
    def parse(cls, text: str) -> "RomCondition":
        for member in cls:
            if member.value.lower() == text.strip().lower():
                return member
        raise FormatError(f"unknown ROM condition: {text!r}")


class BodySide(enum.Enum):
    LEFT = "left"
    RIGHT = "right"

    @classmethod
    def parse(cls, text: str) -> "BodySide":
        for member in cls:
            if member.value == text.strip().lower():
                return member
        raise FormatError(f"unknown body side: {text!r}")


@dataclass(frozen=True)
class ExerciseKind:
    """An exercise plus the joint mapping used to extract its focal angle.

    ``lengthening_increases_angle`` records whether the target muscle
    lengthens as the mapped joint angle grows (curls and rows) or shrinks
    (presses, pushdowns, pulldowns); it decides which half of a repetition
    is labelled eccentric.
    """

    name: str
    focal_joint: str = "elbow"  # "elbow" | "shoulder"
    lengthening_increases_angle: bool = True

    def __post_init__(self):
        if self.focal_joint not in ("elbow", "shoulder"):
            raise LandmarkValidationError(
                f"focal joint must be 'elbow' or 'shoulder', got {self.focal_joint!r}"
            )

    @property
    def display_name(self) -> str:
        return " ".join(w.capitalize() for w in self.name.split("_"))


BAYESIAN_CURL = ExerciseKind("bayesian_curl", "elbow", True)
CABLE_PUSHDOWN = ExerciseKind("cable_pushdown", "elbow", False)
DUMBBELL_CURL = ExerciseKind("dumbbell_curl", "elbow", True)
DUMBBELL_OVERHEAD_EXTENSION = ExerciseKind("dumbbell_overhead_extension", "elbow", False)
DUMBBELL_ROW = ExerciseKind("dumbbell_row", "elbow", True)
FLATPRESS = ExerciseKind("flatpress", "elbow", False)
INCLINE_PRESS = ExerciseKind("incline_press", "elbow", False)
LAT_PULLDOWN = ExerciseKind("lat_pulldown", "shoulder", False)

STANDARD_EXERCISES: dict[str, ExerciseKind] = {
    e.name: e
    for e in (
        BAYESIAN_CURL,
        CABLE_PUSHDOWN,
        DUMBBELL_CURL,
        DUMBBELL_OVERHEAD_EXTENSION,
        DUMBBELL_ROW,
        FLATPRESS,
        INCLINE_PRESS,
        LAT_PULLDOWN,
    )
}


def parse_exercise(text: str) -> ExerciseKind:
    """Resolve an exercise name; unknown names become custom elbow-mapped kinds."""
    key = text.strip().lower().replace(" ", "_").replace("-", "_")
    if key in STANDARD_EXERCISES:
        return STANDARD_EXERCISES[key]
    if not key:
        raise FormatError("empty exercise name")
    return ExerciseKind(key)


@dataclass(frozen=True)
class LandmarkFrame:
    """One video frame: 33 landmark (x, y, visibility) triples."""

    frame_index: int
    timestamp: float
    landmarks: np.ndarray  # shape (33, 3), columns x, y, visibility

    def __post_init__(self):
        lm = np.asarray(self.landmarks, dtype=float)
        if lm.shape != (NUM_LANDMARKS, 3):
            raise LandmarkValidationError(
                f"frame {self.frame_index}: expected {NUM_LANDMARKS}x3 landmarks, got {lm.shape}"
            )
        if not np.all(np.isfinite(lm[:, :2])):
            raise LandmarkValidationError(
                f"frame {self.frame_index}: non-finite landmark coordinate"
            )
        vis = lm[:, 2]
        if not np.all(np.isfinite(vis)) or vis.min() < 0.0 or vis.max() > 1.0:
            raise LandmarkValidationError(
                f"frame {self.frame_index}: visibility outside [0, 1]"
            )
        if self.frame_index < 0:
            raise LandmarkValidationError("frame_index must be >= 0")
        if not math.isfinite(self.timestamp):
            raise LandmarkValidationError("timestamp must be finite")
        lm.flags.writeable = False
        object.__setattr__(self, "landmarks", lm)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LandmarkFrame):
            return NotImplemented
        return (
            self.frame_index == other.frame_index
            and self.timestamp == other.timestamp
            and np.array_equal(self.landmarks, other.landmarks)
        )


@dataclass(frozen=True)
class LandmarkSeries:
    """All frames of one video plus the metadata carried in the file header."""

    video_id: str
    participant_id: str
    exercise: ExerciseKind
    rom_condition: RomCondition
    fps: float
    frames: tuple[LandmarkFrame, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise LandmarkValidationError(f"{self.video_id}: series has no frames")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise LandmarkValidationError(f"{self.video_id}: fps must be positive")
        ts = self.timestamps
        if len(ts) > 1:
            deltas = np.diff(ts)
            if np.any(deltas <= 0):
                bad = int(np.argmax(deltas <= 0)) + 1
                raise LandmarkValidationError(
                    f"{self.video_id}: timestamps not strictly increasing at frame {bad}"
                )
            median_dt = float(np.median(deltas))
            if abs(1.0 / median_dt - self.fps) > 0.1 * self.fps:
                raise LandmarkValidationError(
                    f"{self.video_id}: fps {self.fps} inconsistent with median "
                    f"frame interval {median_dt:.6f}s"
                )

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    @property
    def landmark_array(self) -> np.ndarray:
        """Stacked landmarks, shape (n_frames, 33, 3)."""
        return np.stack([f.landmarks for f in self.frames])

    def __len__(self) -> int:
        return len(self.frames)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _header_line(series: LandmarkSeries) -> str:
    fields = [
        ("schema", SCHEMA_ID),
        ("video_id", series.video_id),
        ("participant_id", series.participant_id),
        ("exercise", series.exercise.name),
        ("rom_condition", series.rom_condition.value),
    ]
    parts = ", ".join(f"{json.dumps(k)}: {json.dumps(v)}" for k, v in fields)
    return "{" + parts + f', "fps": {_fmt(series.fps)}' + "}"


def _frame_line(frame: LandmarkFrame) -> str:
    triples = ", ".join(
        f"[{_fmt(x)}, {_fmt(y)}, {_fmt(v)}]" for x, y, v in frame.landmarks
    )
    return f'{{"i": {frame.frame_index}, "t": {_fmt(frame.timestamp)}, "lm": [{triples}]}}'


def render_landmark_text(series: LandmarkSeries) -> str:
    """Canonical file content: fixed field order, 6-dp floats, LF endings."""
    lines = [_header_line(series)]
    lines.extend(_frame_line(f) for f in series.frames)
    return "\n".join(lines) + "\n"


def write_landmark_file(series: LandmarkSeries, path: str | os.PathLike) -> None:
    """Write a series in canonical form."""
    with open(path, "wb") as fh:
        fh.write(render_landmark_text(series).encode("utf-8"))


def read_landmark_file(path: str | os.PathLike) -> LandmarkSeries:
    """Parse and validate a landmark file; raises with a line number on bad JSON."""
    with open(path, "rb") as fh:
        raw = fh.read().decode("utf-8")
    return parse_landmark_text(raw, source=str(path))


def parse_landmark_text(raw: str, source: str = "<memory>") -> LandmarkSeries:
    path = source
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty file")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:1: malformed JSON header: {exc}") from exc
    if not isinstance(header, dict) or header.get("schema") != SCHEMA_ID:
        raise FormatError(f"{path}: missing or unknown header schema (expected {SCHEMA_ID})")
    for key in ("video_id", "participant_id", "exercise", "rom_condition", "fps"):
        if key not in header:
            raise FormatError(f"{path}: header missing field {key!r}")

    frames = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
        try:
            frames.append(
                LandmarkFrame(
                    frame_index=int(rec["i"]),
                    timestamp=float(rec["t"]),
                    landmarks=np.asarray(rec["lm"], dtype=float),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: bad frame record: {exc}") from exc

    frames.sort(key=lambda f: f.timestamp)
    return LandmarkSeries(
        video_id=str(header["video_id"]),
        participant_id=str(header["participant_id"]),
        exercise=parse_exercise(str(header["exercise"])),
        rom_condition=RomCondition.parse(str(header["rom_condition"])),
        fps=float(header["fps"]),
        frames=frames,
    )
