import numpy as np
import pytest

from jdp import simgen
from jdp.dataset import (
    Cohort,
    CohortIntegrityError,
    CohortParseError,
    EmptyResultError,
    LongitudinalRecord,
    StratumError,
    SurvivalRecord,
    emit_cohort,
    kfold_split,
    load_cohort,
    stratified_sample,
    truncate_history,
)

from conftest import build_cohort


def write_files(tmp_path, long_rows, surv_rows,
                surv_header="subject_id,observed_time,event,w1,w2"):
    lp = tmp_path / "longitudinal.csv"
    sp = tmp_path / "survival.csv"
    lp.write_text("subject_id,time,value\n" + "\n".join(long_rows) + "\n")
    sp.write_text(surv_header + "\n" + "\n".join(surv_rows) + "\n")
    return lp, sp


class TestLoadCohort:
    def test_counts(self, tmp_path):
        long_rows = [f"S{i},{t},{-1.3 + 0.1 * t}" for i in range(3) for t in (0.0, 0.5, 1.0)]
        surv_rows = [f"S{i},4.0,{i % 2},0.1,-0.2" for i in range(3)]
        cohort = load_cohort(*write_files(tmp_path, long_rows, surv_rows))
        assert cohort.n_subjects == 3
        assert len(cohort.measurements) == 9
        assert cohort.schema == ("w1", "w2")

    def test_orphan_subject_named(self, tmp_path):
        lp, sp = write_files(
            tmp_path,
            ["S0,0.0,-1.3", "X9,0.0,-1.2"],
            ["S0,4.0,1,0.1,-0.2"],
        )
        with pytest.raises(CohortIntegrityError, match="X9"):
            load_cohort(lp, sp)

    def test_measurement_after_observed_time(self, tmp_path):
        lp, sp = write_files(
            tmp_path,
            ["S0,0.0,-1.3", "S0,5.0,-0.9"],
            ["S0,4.0,1,0.1,-0.2"],
        )
        with pytest.raises(CohortIntegrityError):
            load_cohort(lp, sp)

    def test_parse_error_reports_row_and_column(self, tmp_path):
        lp, sp = write_files(
            tmp_path,
            ["S0,0.0,-1.3", "S0,oops,-1.2"],
            ["S0,4.0,1,0.1,-0.2"],
        )
        with pytest.raises(CohortParseError) as err:
            load_cohort(lp, sp)
        assert err.value.row == 3
        assert err.value.column == 2

    def test_bad_event_flag(self, tmp_path):
        lp, sp = write_files(tmp_path, ["S0,0.0,-1.3"], ["S0,4.0,2,0.1,-0.2"])
        with pytest.raises(CohortParseError):
            load_cohort(lp, sp)

    def test_round_trip_bit_exact(self, tmp_path):
        cohort = build_cohort([
            ("A", 1.0 / 3.0 + 4.0, True, (1e-17, 0.1 + 0.2), [(0.0, np.pi), (1.5, -2.0 / 7.0)]),
            ("B", 9.000000000000002, False, (-1.73, 0.7), [(0.25, 1e300)]),
        ])
        lp, sp = tmp_path / "l.csv", tmp_path / "s.csv"
        emit_cohort(cohort, lp, sp)
        again = load_cohort(lp, sp)
        assert again == cohort


class TestInvariants:
    def test_duplicate_measurement_time_rejected(self):
        with pytest.raises(CohortIntegrityError):
            build_cohort([("A", 2.0, True, (0.0, 0.0), [(1.0, 0.5), (1.0, 0.6)])])

    def test_subject_without_measurements_rejected(self):
        with pytest.raises(CohortIntegrityError):
            Cohort.build(
                ("w1",),
                [SurvivalRecord("A", 2.0, True, (0.0,))],
                [],
            )

    def test_negative_time_rejected(self):
        with pytest.raises(CohortIntegrityError):
            LongitudinalRecord("A", -0.5, 1.0)

    def test_nonfinite_value_rejected(self):
        with pytest.raises(CohortIntegrityError):
            LongitudinalRecord("A", 0.5, float("nan"))


class TestTruncateHistory:
    def test_filter_semantics(self, tiny_cohort):
        out = truncate_history(tiny_cohort, 1.0)
        assert out.subject_ids == ("A1", "B2", "C3")
        assert all(m.time <= 1.0 for m in out.measurements)
        # survival fields untouched
        assert out.by_id["B2"].observed_time == 2.5

    def test_idempotent(self, tiny_cohort):
        once = truncate_history(tiny_cohort, 1.0)
        assert truncate_history(once, 1.0) == once

    def test_drops_subjects_at_or_before_t(self, tiny_cohort):
        out = truncate_history(tiny_cohort, 2.5)
        assert out.subject_ids == ("A1", "C3")

    def test_empty_result(self, tiny_cohort):
        with pytest.raises(EmptyResultError):
            truncate_history(tiny_cohort, 10.0)

    def test_scenario_grid_enumeration(self):
        # Every subject keeps exactly the half-unit grid points <= 1 that
        # fall strictly before its observed time.
        cohort = simgen.generate_scenario(simgen.scenario_1(2000), seed=3)
        out = truncate_history(cohort, 1.0)
        for rec in out.subjects:
            got = out.measurements_by_id[rec.subject_id][0]
            expected = [s for s in (0.0, 0.5, 1.0) if s < rec.observed_time]
            assert list(got) == expected


class TestKfold:
    def test_even_split(self, tiny_cohort):
        cohort = build_cohort([
            (f"S{i}", 3.0, False, (0.0, 0.0), [(0.0, 0.1)]) for i in range(10)
        ])
        assignment = kfold_split(cohort, 5, seed=1)
        sizes = [len(assignment.test_ids(k)) for k in range(5)]
        assert sizes == [2, 2, 2, 2, 2]

    def test_determinism(self, s1_cohort_small):
        a = kfold_split(s1_cohort_small, 4, seed=9)
        b = kfold_split(s1_cohort_small, 4, seed=9)
        assert a == b
        c = kfold_split(s1_cohort_small, 4, seed=10)
        assert a != c

    def test_sizes_differ_by_at_most_one(self):
        cohort = build_cohort([
            (f"S{i}", 3.0, False, (0.0, 0.0), [(0.0, 0.1)]) for i in range(7)
        ])
        assignment = kfold_split(cohort, 3, seed=2)
        sizes = sorted(len(assignment.test_ids(k)) for k in range(3))
        assert sizes == [2, 2, 3]

    def test_partition(self, s1_cohort_small):
        assignment = kfold_split(s1_cohort_small, 5, seed=4)
        seen = [sid for k in range(5) for sid in assignment.test_ids(k)]
        assert sorted(seen) == list(s1_cohort_small.subject_ids)

    def test_k_out_of_range(self, tiny_cohort):
        with pytest.raises(ValueError):
            kfold_split(tiny_cohort, 1, seed=0)
        with pytest.raises(ValueError):
            kfold_split(tiny_cohort, 4, seed=0)


class TestStratifiedSample:
    @pytest.fixture
    def mixed_cohort(self):
        return build_cohort([
            (f"E{i}", 3.0, True, (0.0, 0.0), [(0.0, 0.1)]) for i in range(40)
        ] + [
            (f"C{i}", 3.0, False, (0.0, 0.0), [(0.0, 0.1)]) for i in range(160)
        ])

    def test_event_rate(self, mixed_cohort):
        out = stratified_sample(mixed_cohort, 100, 0.11, seed=5)
        assert out.n_subjects == 100
        assert int(out.event_flags.sum()) == 11

    def test_zero_rate(self, mixed_cohort):
        out = stratified_sample(mixed_cohort, 50, 0.0, seed=5)
        assert not out.event_flags.any()

    def test_insufficient_stratum(self, mixed_cohort):
        with pytest.raises(StratumError):
            stratified_sample(mixed_cohort, 100, 0.5, seed=5)  # needs 50 events
