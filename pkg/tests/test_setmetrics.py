import numpy as np
import pytest

from romkit.core import BodySide, RomCondition, parse_exercise
from romkit.errors import AggregationError, DatasetBuildError, FormatError, InsufficientDataError
from romkit.metareg import build_dataset
from romkit.segmentation import Repetition
from romkit.setmetrics import (
    OutcomeKind,
    SetSummary,
    aggregate_participant,
    aggregate_summaries,
    descriptive_table,
    read_participant_metadata,
    summaries_for_video,
    summaries_from_csv,
    summaries_to_csv,
    summarize_set,
    trim_repetitions,
)

from oracles import pooled_moments_oracle


def make_rep(rom=80.0, duration=4.0, ecc=2.2, con=1.8, start=0.0):
    return Repetition(
        start_time=start,
        end_time=start + duration,
        start_angle=50.0,
        end_angle=52.0,
        peak_angle=50.0 + rom,
        trough_angle=50.0,
        rom=rom,
        duration=duration,
        concentric_duration=con,
        eccentric_duration=ecc,
        split_time=start + ecc,
    )


def make_summary(pid="P01", exercise="dumbbell_curl", cond=RomCondition.FROM,
                 outcome=OutcomeKind.RANGE_OF_MOTION, mean=100.0, sd=10.0, k=5,
                 left=1.0, sex="M"):
    return SetSummary(
        participant_id=pid,
        exercise=parse_exercise(exercise),
        rom_condition=cond,
        outcome=outcome,
        mean=mean,
        sd=sd,
        k=k,
        side_left_fraction=left,
        sex=sex,
    )


class TestTrim:
    def test_five_reps_keep_middle_three(self):
        reps = [make_rep(start=4.0 * i) for i in range(5)]
        assert trim_repetitions(reps) == reps[1:4]

    def test_two_reps_empty(self):
        assert trim_repetitions([make_rep(), make_rep(start=4.0)]) == []

    def test_ten_reps_keep_eight_in_order(self):
        reps = [make_rep(start=4.0 * i) for i in range(10)]
        out = trim_repetitions(reps)
        assert out == reps[1:9]


class TestSummarize:
    def test_hand_computed_mean_sd(self):
        reps = [make_rep(rom=80), make_rep(rom=90), make_rep(rom=100)]
        mean, sd, k = summarize_set(reps, OutcomeKind.RANGE_OF_MOTION)
        assert (mean, k) == (90.0, 3)
        assert sd == pytest.approx(10.0)

    def test_identical_values_zero_sd(self):
        reps = [make_rep(duration=3.5)] * 4
        _, sd, _ = summarize_set(reps, OutcomeKind.REP_DURATION)
        assert sd == 0.0

    def test_matches_two_pass_oracle(self, rng):
        roms = rng.uniform(40, 140, 12)
        reps = [make_rep(rom=r) for r in roms]
        mean, sd, k = summarize_set(reps, OutcomeKind.RANGE_OF_MOTION)
        assert mean == pytest.approx(roms.mean(), abs=1e-12)
        assert sd == pytest.approx(roms.std(ddof=1), abs=1e-12)

    def test_too_few_reps_raises(self):
        with pytest.raises(InsufficientDataError):
            summarize_set([make_rep()], OutcomeKind.RANGE_OF_MOTION)

    def test_phase_outcomes_extracted(self):
        reps = [make_rep(ecc=2.5, con=1.5), make_rep(ecc=2.7, con=1.3)]
        ecc_mean, _, _ = summarize_set(reps, OutcomeKind.ECCENTRIC_DURATION)
        con_mean, _, _ = summarize_set(reps, OutcomeKind.CONCENTRIC_DURATION)
        assert ecc_mean == pytest.approx(2.6)
        assert con_mean == pytest.approx(1.4)

    def test_summaries_for_video_covers_all_outcomes(self):
        reps = [make_rep(start=4.0 * i) for i in range(4)]
        rows = summaries_for_video("P01", parse_exercise("flatpress"),
                                   RomCondition.PROM, BodySide.RIGHT, reps, sex="F")
        assert {r.outcome for r in rows} == {
            OutcomeKind.REP_DURATION,
            OutcomeKind.ECCENTRIC_DURATION,
            OutcomeKind.CONCENTRIC_DURATION,
            OutcomeKind.RANGE_OF_MOTION,
        }
        assert all(r.side_left_fraction == 0.0 for r in rows)


class TestAggregate:
    def test_single_record_identity(self):
        s = make_summary()
        assert aggregate_participant([s]) == s

    def test_hand_pooled_example(self):
        a = make_summary(mean=100.0, sd=0.0, k=4)
        b = make_summary(mean=110.0, sd=0.0, k=6)
        pooled = aggregate_participant([a, b])
        assert pooled.mean == pytest.approx(106.0)
        assert pooled.k == 10
        assert pooled.sd == pytest.approx(np.sqrt(240.0 / 9.0))

    def test_matches_concatenation_oracle(self, rng):
        groups = [rng.uniform(50, 150, int(rng.integers(2, 9))) for _ in range(4)]
        records = [
            make_summary(mean=g.mean(), sd=g.std(ddof=1), k=len(g)) for g in groups
        ]
        pooled = aggregate_participant(records)
        mean, sd, k = pooled_moments_oracle(groups)
        assert pooled.mean == pytest.approx(mean, abs=1e-9)
        assert pooled.sd == pytest.approx(sd, abs=1e-9)
        assert pooled.k == k

    def test_partition_invariance(self, rng):
        values = rng.uniform(60, 120, 12)
        split_a = [values[:4], values[4:]]
        split_b = [values[:7], values[7:10], values[10:]]
        rec = lambda g: make_summary(mean=g.mean(), sd=g.std(ddof=1), k=len(g))
        pooled_a = aggregate_participant([rec(g) for g in split_a])
        pooled_b = aggregate_participant([rec(g) for g in split_b])
        assert pooled_a.mean == pytest.approx(pooled_b.mean, abs=1e-9)
        assert pooled_a.sd == pytest.approx(pooled_b.sd, abs=1e-9)

    def test_mixed_keys_rejected(self):
        with pytest.raises(AggregationError):
            aggregate_participant([make_summary(pid="P01"), make_summary(pid="P02")])

    def test_side_fraction_rep_weighted(self):
        a = make_summary(left=1.0, k=4)
        b = make_summary(left=0.0, k=6)
        assert aggregate_participant([a, b]).side_left_fraction == pytest.approx(0.4)

    def test_aggregate_summaries_groups_by_key(self):
        rows = [
            make_summary(pid="P01", mean=100, sd=5, k=4),
            make_summary(pid="P02", mean=90, sd=5, k=4),
            make_summary(pid="P01", mean=110, sd=5, k=4),
        ]
        out = aggregate_summaries(rows)
        assert len(out) == 2
        assert out[0].participant_id == "P01" and out[0].k == 8


class TestBuildDataset:
    def base_rows(self):
        rows = []
        for pid, sex in (("P01", "M"), ("P02", "F"), ("P03", "M")):
            for ex in ("dumbbell_curl", "flatpress"):
                for cond in (RomCondition.FROM, RomCondition.PROM):
                    rows.append(
                        make_summary(pid=pid, exercise=ex, cond=cond,
                                     mean=100.0, sd=10.0, k=5, sex=sex)
                    )
        return rows

    def test_variance_and_weights(self):
        rows = [make_summary(sd=10.0, k=25), make_summary(pid="P02", sd=10.0, k=25),
                make_summary(exercise="flatpress", sd=10.0, k=25),
                make_summary(pid="P02", exercise="flatpress", sd=10.0, k=25)]
        data = build_dataset(rows)
        assert np.allclose(data.sigma2, 4.0)
        assert np.allclose(data.weights, 0.25)

    def test_zero_sd_hits_floor_and_flagged(self):
        rows = self.base_rows()
        rows[0] = make_summary(sd=0.0, k=4)
        data = build_dataset(rows)
        assert data.floored[0]
        assert data.sigma2[0] == pytest.approx(0.1**2 / 4)
        assert not data.floored[1:].any()

    def test_duplicate_rows_rejected(self):
        rows = self.base_rows()
        with pytest.raises(DatasetBuildError, match="duplicate"):
            build_dataset(rows + [rows[0]])

    def test_weights_positive_finite(self):
        data = build_dataset(self.base_rows())
        assert np.all(data.weights > 0)
        assert np.all(np.isfinite(data.weights))

    def test_mixed_outcomes_rejected(self):
        rows = self.base_rows()
        rows[0] = make_summary(outcome=OutcomeKind.REP_DURATION)
        with pytest.raises(DatasetBuildError, match="mixed"):
            build_dataset(rows)

    def test_sex_metadata_overrides(self):
        data = build_dataset(self.base_rows(), sex_by_participant={"P01": "F", "P02": "M", "P03": "M"})
        female_rows = data.female[data.pid_idx == 0]
        assert female_rows.all()


class TestDescriptiveTable:
    def test_single_summary_row(self):
        rows = summaries_for_video("P01", parse_exercise("dumbbell_curl"),
                                   RomCondition.FROM, BodySide.LEFT,
                                   [make_rep(start=4.0 * i, rom=80 + i) for i in range(4)])
        table = descriptive_table(rows)
        assert len(table) == 1
        row = table[0]
        assert row.rom_condition is RomCondition.FROM
        assert row.left_fraction == 1.0
        assert row.mean_reps == 4.0

    def test_synthetic_cohort_recovery(self, rng):
        all_rows = []
        rom_values = {}
        for pid in ("P01", "P02", "P03"):
            roms = rng.uniform(70, 120, 5)
            rom_values[pid] = roms
            reps = [make_rep(start=4.0 * i, rom=r) for i, r in enumerate(roms)]
            all_rows.extend(
                summaries_for_video(pid, parse_exercise("flatpress"),
                                    RomCondition.PROM, BodySide.LEFT, reps)
            )
        table = descriptive_table(all_rows)
        concat = np.concatenate(list(rom_values.values()))
        rom_mean = table[0].outcome_mean[OutcomeKind.RANGE_OF_MOTION]
        rom_sd = table[0].outcome_sd[OutcomeKind.RANGE_OF_MOTION]
        assert rom_mean == pytest.approx(concat.mean(), abs=1e-9)
        assert rom_sd == pytest.approx(concat.std(ddof=1), abs=1e-9)


class TestCsv:
    def test_roundtrip(self):
        rows = [make_summary(), make_summary(pid="P02", cond=RomCondition.PROM, mean=55.5)]
        text = summaries_to_csv(rows)
        parsed = summaries_from_csv(text)
        assert len(parsed) == 2
        assert parsed[1].mean == pytest.approx(55.5)
        assert parsed[1].rom_condition is RomCondition.PROM

    def test_missing_column_rejected(self):
        with pytest.raises(FormatError, match="missing columns"):
            summaries_from_csv("participant_id,exercise\nP01,flatpress\n")

    def test_metadata_parsing_and_join(self):
        meta = read_participant_metadata("participant_id,sex\nP01,F\nP02,m\n")
        assert meta == {"P01": "F", "P02": "M"}
        rows = summaries_from_csv(summaries_to_csv([make_summary()]), meta)
        assert rows[0].sex == "F"

    def test_metadata_bad_sex_rejected(self):
        with pytest.raises(FormatError):
            read_participant_metadata("participant_id,sex\nP01,x\n")
