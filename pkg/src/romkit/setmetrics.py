"""Per-set summaries and participant-level aggregation.

A video is treated as one set. The first and last repetitions are trimmed
before summarizing, multiple videos of the same (participant, exercise,
condition) pool into a single record, and the resulting mean/sd/count
triplets are what the meta-regression consumes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .core import BodySide, ExerciseKind, RomCondition, parse_exercise
from .errors import AggregationError, FormatError, InsufficientDataError
from .segmentation import Repetition

MIN_REPS_PER_VIDEO = 4  # >= 2 survive trimming; sparser videos are excluded


class OutcomeKind(Enum):
    REP_DURATION = "rep_duration"
    ECCENTRIC_DURATION = "eccentric"
    CONCENTRIC_DURATION = "concentric"
    RANGE_OF_MOTION = "rom"
    LOG_MEAN_ROM = "log_rom"

    @classmethod
    def parse(cls, text: str) -> "OutcomeKind":
        for member in cls:
            if member.value == text.strip().lower():
                return member
        raise FormatError(f"unknown outcome: {text!r}")


_REP_VALUE = {
    OutcomeKind.REP_DURATION: lambda r: r.duration,
    OutcomeKind.ECCENTRIC_DURATION: lambda r: r.eccentric_duration,
    OutcomeKind.CONCENTRIC_DURATION: lambda r: r.concentric_duration,
    OutcomeKind.RANGE_OF_MOTION: lambda r: r.rom,
}


@dataclass(frozen=True)
class SetSummary:
    participant_id: str
    exercise: ExerciseKind
    rom_condition: RomCondition
    outcome: OutcomeKind
    mean: float
    sd: float
    k: int
    side_left_fraction: float
    sex: str = "M"

    def __post_init__(self):
        if self.k < 2:
            raise InsufficientDataError("a set summary needs k >= 2 repetitions")
        if self.sd < 0 or not math.isfinite(self.mean):
            raise ValueError("sd must be >= 0 and mean finite")
        if self.sex not in ("M", "F"):
            raise ValueError(f"sex must be 'M' or 'F', got {self.sex!r}")

    @property
    def key(self) -> tuple:
        return (self.participant_id, self.exercise.name, self.rom_condition, self.outcome)


def trim_repetitions(reps: list[Repetition]) -> list[Repetition]:
    """Drop the first and last repetition of a set; empty below 3 reps."""
    if len(reps) < 3:
        return []
    return list(reps[1:-1])


def summarize_set(reps: list[Repetition], outcome: OutcomeKind) -> tuple[float, float, int]:
    """Mean, sample standard deviation (n-1) and count of a per-rep outcome."""
    if outcome not in _REP_VALUE:
        raise ValueError(f"{outcome} is not a per-repetition outcome")
    if len(reps) < 2:
        raise InsufficientDataError(
            f"set has {len(reps)} repetitions after trimming; need >= 2"
        )
    values = np.array([_REP_VALUE[outcome](r) for r in reps], dtype=float)
    return float(values.mean()), float(values.std(ddof=1)), len(values)


def summaries_for_video(
    participant_id: str,
    exercise: ExerciseKind,
    rom_condition: RomCondition,
    side: BodySide,
    trimmed: list[Repetition],
    sex: str = "M",
) -> list[SetSummary]:
    """One SetSummary per per-rep outcome for a single video/set."""
    left = 1.0 if side is BodySide.LEFT else 0.0
    out = []
    for outcome in _REP_VALUE:
        mean, sd, k = summarize_set(trimmed, outcome)
        out.append(
            SetSummary(
                participant_id=participant_id,
                exercise=exercise,
                rom_condition=rom_condition,
                outcome=outcome,
                mean=mean,
                sd=sd,
                k=k,
                side_left_fraction=left,
                sex=sex,
            )
        )
    return out


def _pooled(records: list[SetSummary]) -> tuple[float, float, int]:
    ks = np.array([r.k for r in records], dtype=float)
    means = np.array([r.mean for r in records])
    sds = np.array([r.sd for r in records])
    total_k = ks.sum()
    grand = float((ks * means).sum() / total_k)
    ss = float(((ks - 1) * sds**2 + ks * (means - grand) ** 2).sum())
    sd = math.sqrt(ss / (total_k - 1))
    return grand, sd, int(total_k)


def aggregate_participant(records: list[SetSummary]) -> SetSummary:
    """Pool several sets of the same (participant, exercise, condition, outcome).

    The pooled moments equal the moments of the concatenated raw repetition
    values, so the result is invariant to how reps were split across videos.
    """
    if not records:
        raise AggregationError("nothing to aggregate")
    if len({r.key for r in records}) != 1:
        raise AggregationError(
            f"records span multiple keys: {sorted({str(r.key) for r in records})}"
        )
    if len(records) == 1:
        return records[0]
    mean, sd, k = _pooled(records)
    ks = np.array([r.k for r in records], dtype=float)
    left = float((ks * np.array([r.side_left_fraction for r in records])).sum() / ks.sum())
    return replace(records[0], mean=mean, sd=sd, k=k, side_left_fraction=left)


def aggregate_summaries(rows: list[SetSummary]) -> list[SetSummary]:
    """Aggregate duplicates of the same key; order of first appearance kept."""
    groups: dict[tuple, list[SetSummary]] = {}
    order: list[tuple] = []
    for row in rows:
        if row.key not in groups:
            groups[row.key] = []
            order.append(row.key)
        groups[row.key].append(row)
    return [aggregate_participant(groups[key]) for key in order]


@dataclass(frozen=True)
class DescriptiveRow:
    exercise: ExerciseKind
    rom_condition: RomCondition
    outcome_mean: dict
    outcome_sd: dict
    mean_reps: float
    sd_reps: float
    left_fraction: float
    n_records: int


def descriptive_table(summaries: list[SetSummary]) -> list[DescriptiveRow]:
    """Per (exercise, condition): rep-weighted mean and pooled sd of each outcome,
    reps per set, and left-side proportion."""
    per_rep_outcomes = list(_REP_VALUE)
    cells: dict[tuple, dict[OutcomeKind, list[SetSummary]]] = {}
    for s in summaries:
        cell = cells.setdefault((s.exercise.name, s.rom_condition), {})
        cell.setdefault(s.outcome, []).append(s)
    rows = []
    for (_, condition), by_outcome in sorted(
        cells.items(), key=lambda kv: (kv[0][1].value, kv[0][0])
    ):
        means, sds = {}, {}
        for outcome in per_rep_outcomes:
            recs = by_outcome.get(outcome, [])
            if recs:
                m, sd, _ = _pooled(recs) if len(recs) > 1 else (recs[0].mean, recs[0].sd, recs[0].k)
                means[outcome] = m
                sds[outcome] = sd
        anchor = next(iter(by_outcome.values()))
        ks = np.array([r.k for r in anchor], dtype=float)
        lefts = np.array([r.side_left_fraction for r in anchor])
        rows.append(
            DescriptiveRow(
                exercise=anchor[0].exercise,
                rom_condition=condition,
                outcome_mean=means,
                outcome_sd=sds,
                mean_reps=float(ks.mean()),
                sd_reps=float(ks.std(ddof=1)) if len(ks) > 1 else 0.0,
                left_fraction=float(lefts.mean()),
                n_records=len(anchor),
            )
        )
    return rows


SUMMARY_CSV_COLUMNS = [
    "participant_id",
    "exercise",
    "rom_condition",
    "outcome",
    "mean",
    "sd",
    "k",
    "side_left_fraction",
]


def summaries_to_csv(rows: list[SetSummary]) -> str:
    """Interchange CSV into the statistics engine (sex joins via metadata file)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_CSV_COLUMNS)
    for r in rows:
        writer.writerow(
            [
                r.participant_id,
                r.exercise.name,
                r.rom_condition.value,
                r.outcome.value,
                f"{r.mean:.10g}",
                f"{r.sd:.10g}",
                r.k,
                f"{r.side_left_fraction:.10g}",
            ]
        )
    return buf.getvalue()


def summaries_from_csv(text: str, sex_by_participant: dict[str, str] | None = None) -> list[SetSummary]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or set(SUMMARY_CSV_COLUMNS) - set(reader.fieldnames):
        missing = sorted(set(SUMMARY_CSV_COLUMNS) - set(reader.fieldnames or []))
        raise FormatError(f"summary CSV missing columns: {missing}")
    sex_by_participant = sex_by_participant or {}
    rows = []
    for i, rec in enumerate(reader, start=2):
        try:
            rows.append(
                SetSummary(
                    participant_id=rec["participant_id"],
                    exercise=parse_exercise(rec["exercise"]),
                    rom_condition=RomCondition.parse(rec["rom_condition"]),
                    outcome=OutcomeKind.parse(rec["outcome"]),
                    mean=float(rec["mean"]),
                    sd=float(rec["sd"]),
                    k=int(rec["k"]),
                    side_left_fraction=float(rec["side_left_fraction"]),
                    sex=sex_by_participant.get(rec["participant_id"], "M"),
                )
            )
        except (ValueError, InsufficientDataError) as exc:
            raise FormatError(f"summary CSV row {i}: {exc}") from exc
    return rows


def read_participant_metadata(text: str) -> dict[str, str]:
    """Parse the participant metadata CSV: columns participant_id, sex."""
    reader = csv.DictReader(io.StringIO(text))
    required = {"participant_id", "sex"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise FormatError(
            f"participant metadata needs columns {sorted(required)}, got {reader.fieldnames}"
        )
    out = {}
    for row in reader:
        sex = row["sex"].strip().upper()
        if sex not in ("M", "F"):
            raise FormatError(f"participant {row['participant_id']}: sex must be M or F")
        out[row["participant_id"]] = sex
    return out
