import io
import math

import numpy as np
import pytest

from jdp import simgen
from jdp.dataset import emit_cohort
from jdp.seeds import rng_for
from jdp.simgen import (
    EventParams,
    EventTimeDomainError,
    LongitudinalParams,
    ScenarioConfig,
    closed_form_cumulative_hazard,
    closed_form_event_time,
    draw_subject_effects,
    generate_longitudinal,
    generate_scenario,
    invert_numeric_hazard,
    numeric_cumulative_hazard,
    scenario_1,
    scenario_2,
)

LG = simgen.TABLE1_LONGITUDINAL
S1 = scenario_1().event
S2 = scenario_2().event


class TestSubjectEffects:
    def test_degenerate_zero_covariance(self):
        params = LongitudinalParams(-1.35, 0.3, 0.0, 0.0, 0.0, 0.25)
        rng = rng_for("fx", 0)
        assert draw_subject_effects(params, rng) == (0.0, 0.0)

    def test_correlation_recovery(self):
        # Correlation of (b0, b1) over many draws matches the generating 0.2.
        rng = rng_for("fx", 1)
        draws = np.array([draw_subject_effects(LG, rng) for _ in range(100_000)])
        corr = np.corrcoef(draws.T)[0, 1]
        assert abs(corr - 0.2) < 0.01

    def test_seed_determinism(self):
        a = draw_subject_effects(LG, rng_for("fx", 2))
        b = draw_subject_effects(LG, rng_for("fx", 2))
        assert a == b


class TestGenerateLongitudinal:
    def test_noiseless_line(self):
        params = LongitudinalParams(-1.35, 0.3, 0.27, 0.08, 0.2, 0.0)
        recs = generate_longitudinal(params, "S", (0.0, 0.0), rng_for("g", 0))
        at_one = next(r for r in recs if r.time == 1.0)
        assert at_one.value == pytest.approx(-1.05, abs=1e-12)
        at_zero = next(r for r in recs if r.time == 0.0)
        assert at_zero.value == pytest.approx(-1.35, abs=1e-12)

    def test_intercept_shift(self):
        params = LongitudinalParams(-1.35, 0.3, 0.27, 0.08, 0.2, 0.0)
        recs = generate_longitudinal(params, "S", (0.4, 0.0), rng_for("g", 0))
        assert recs[0].value == pytest.approx(-1.35 + 0.4, abs=1e-12)

    def test_default_grid_has_21_points(self):
        recs = generate_longitudinal(LG, "S", (0.0, 0.0), rng_for("g", 1))
        assert len(recs) == 21
        assert recs[0].time == 0.0 and recs[-1].time == 10.0


class TestClosedFormEventTime:
    def test_u_one_gives_zero(self):
        assert closed_form_event_time(1.0, 0.3, -0.2, 0.1, 0.01, S1, LG) == 0.0

    def test_pinned_value(self):
        # Independent evaluation of the generator formula at u=0.5 with all
        # covariates and random effects zero, scenario-1 parameters.
        a_fac = math.exp(S1.alpha * LG.beta0)
        arg = (-math.log(0.5)) * (1 + S1.v) / (a_fac * S1.lam * S1.v * S1.alpha) + 1.0
        expected = (math.log(arg) / LG.beta1) ** (1.0 / (1.0 + S1.v))
        got = closed_form_event_time(0.5, 0.0, 0.0, 0.0, 0.0, S1, LG)
        assert got == pytest.approx(expected, rel=1e-14)
        assert got == pytest.approx(4.2205467290569265, rel=1e-12)  # regression pin

    def test_negative_slope_domain_error(self):
        with pytest.raises(EventTimeDomainError):
            closed_form_event_time(0.5, 0.0, 0.0, 0.0, -0.5, S1, LG)

    def test_inversion_property(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            b0, b1 = 0.27 * rng.standard_normal(), 0.08 * rng.standard_normal()
            w1, w2 = rng.uniform(-1.73, 1.73), 0.7 * rng.standard_normal()
            u = rng.uniform(1e-6, 1 - 1e-6)
            try:
                t_star = closed_form_event_time(u, w1, w2, b0, b1, S2, LG)
            except EventTimeDomainError:
                continue
            h = closed_form_cumulative_hazard(t_star, w1, w2, b0, b1, S2, LG)
            assert h == pytest.approx(-math.log(u), rel=1e-8)


class TestClosedFormCumulativeHazard:
    def test_zero_at_zero(self):
        assert closed_form_cumulative_hazard(0.0, 0.4, 0.1, 0.0, 0.0, S1, LG) == 0.0

    def test_monotone_for_nonnegative_slope(self):
        h1 = closed_form_cumulative_hazard(1.0, 0.2, 0.1, 0.05, 0.0, S1, LG)
        h2 = closed_form_cumulative_hazard(2.0, 0.2, 0.1, 0.05, 0.0, S1, LG)
        assert h2 > h1 > 0

    def test_pinned_value(self):
        # Spreadsheet-style evaluation at t=1 with all effects zero.
        expected = (
            math.exp(S1.alpha * LG.beta0) / (1 + S1.v)
            * S1.lam * S1.v * S1.alpha * (math.exp(LG.beta1) - 1.0)
        )
        got = closed_form_cumulative_hazard(1.0, 0.0, 0.0, 0.0, 0.0, S1, LG)
        assert got == pytest.approx(expected, rel=1e-14)
        assert got == pytest.approx(0.000918496570234106, rel=1e-12)


class TestNumericCumulativeHazard:
    def test_zero_at_zero(self):
        assert numeric_cumulative_hazard(0.0, 0.1, 0.1, 0.0, 0.0, S1, LG) == 0.0

    def test_alpha_zero_is_weibull(self):
        ev = EventParams(lam=0.5, v=1.03, alpha=0.0, gamma1=0.5, gamma2=1.5, censor_upper=7.0)
        for t in (0.5, 2.0, 6.0):
            expected = math.exp(0.5 * 0.3 + 1.5 * (-0.4)) * 0.5 * t**1.03
            got = numeric_cumulative_hazard(t, 0.3, -0.4, 0.2, -0.05, ev, LG)
            assert got == pytest.approx(expected, rel=1e-9)

    def test_v_one_exponential_form(self):
        ev = EventParams(lam=0.5, v=1.0, alpha=4.5, gamma1=0.5, gamma2=1.5, censor_upper=7.0)
        c = ev.alpha * (LG.beta1 + 0.02)
        a = math.exp(ev.gamma1 * 0.3 + ev.gamma2 * (-0.4) + ev.alpha * (LG.beta0 + 0.1))
        for t in (0.5, 1.5, 3.0):
            expected = ev.lam * a * (math.exp(c * t) - 1.0) / c
            got = numeric_cumulative_hazard(t, 0.3, -0.4, 0.1, 0.02, ev, LG)
            assert got == pytest.approx(expected, rel=1e-8)


class TestInvertNumericHazard:
    def test_round_trip(self):
        target = numeric_cumulative_hazard(2.5, 0.4, -0.2, 0.1, 0.02, S1, LG)
        t = invert_numeric_hazard(target, 0.4, -0.2, 0.1, 0.02, S1, LG)
        assert t == pytest.approx(2.5, abs=1e-6)

    def test_weibull_analytic_inverse(self):
        ev = EventParams(lam=0.5, v=1.03, alpha=0.0, gamma1=0.5, gamma2=1.5, censor_upper=7.0)
        s = 1.7
        target = math.exp(0.5 * 0.3 + 1.5 * (-0.4)) * 0.5 * s**1.03
        t = invert_numeric_hazard(target, 0.3, -0.4, 0.0, 0.0, ev, LG)
        assert t == pytest.approx(s, abs=1e-8)

    def test_small_target_gives_small_time(self):
        t = invert_numeric_hazard(1e-10, 0.0, 0.0, 0.0, 0.0, S1, LG)
        assert 0 < t < 1e-3

    def test_invalid_target(self):
        with pytest.raises(ValueError):
            invert_numeric_hazard(0.0, 0.0, 0.0, 0.0, 0.0, S1, LG)


class TestGenerateScenario:
    def test_empty_cohort(self):
        cfg = ScenarioConfig(LG, S1, 0, 1.0, 4.0)
        cohort = generate_scenario(cfg, seed=0)
        assert cohort.n_subjects == 0

    def test_prevalence_matches_reported_rate(self):
        # The reported simulated event rate is about 48%; the published
        # generator reproduces it for the first scenario configuration.
        cohort = generate_scenario(scenario_1(2000), seed=13)
        assert abs(cohort.event_flags.mean() - 0.48) < 0.05

    def test_cohort_invariants_and_schema(self):
        cohort = generate_scenario(scenario_2(300), seed=5)
        assert cohort.schema == ("w1", "w2")
        for rec in cohort.subjects:
            times = cohort.measurements_by_id[rec.subject_id][0]
            assert len(times) >= 1
            assert times.max() < rec.observed_time

    def test_w1_range(self):
        cohort = generate_scenario(scenario_1(500), seed=6)
        w1 = cohort.covariate_matrix[:, 0]
        assert w1.min() >= -1.73 and w1.max() <= 1.73

    def test_byte_identical_emission(self, tmp_path):
        for run in ("a", "b"):
            cohort = generate_scenario(scenario_1(150), seed=99)
            emit_cohort(cohort, tmp_path / f"{run}_l.csv", tmp_path / f"{run}_s.csv")
        assert (tmp_path / "a_l.csv").read_bytes() == (tmp_path / "b_l.csv").read_bytes()
        assert (tmp_path / "a_s.csv").read_bytes() == (tmp_path / "b_s.csv").read_bytes()

    def test_domain_fallback_censors(self):
        # A strongly negative population slope makes the closed-form inverse
        # undefined for every subject; the policy censors them at C.
        lg = LongitudinalParams(-1.35, -0.5, 0.01, 0.0, 0.0, 0.25)
        cfg = ScenarioConfig(lg, S1, 20, 1.0, 4.0)
        cohort = generate_scenario(cfg, seed=3)
        assert cohort.n_subjects == 20
        assert not cohort.event_flags.any()

    def test_numeric_mode(self):
        cfg = ScenarioConfig(LG, S1, 40, 1.0, 4.0)
        cohort = generate_scenario(cfg, seed=11, generator_mode="numeric")
        assert cohort.n_subjects == 40

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            generate_scenario(scenario_1(10), seed=0, generator_mode="exact")


class TestParamValidation:
    def test_bad_correlation(self):
        with pytest.raises(ValueError):
            LongitudinalParams(-1.35, 0.3, 0.27, 0.08, 1.2, 0.25)

    def test_bad_censor_upper(self):
        with pytest.raises(ValueError):
            EventParams(0.5, 1.03, 4.5, 0.5, 1.5, censor_upper=0.9)

    def test_bad_horizons(self):
        with pytest.raises(ValueError):
            ScenarioConfig(LG, S1, 10, 4.0, 1.0)
