import numpy as np
import pytest

from jdp import simgen
from jdp.lme import NonIdentifiableError, fit_lme, predict_trajectory

from conftest import build_cohort


def line_cohort(n_subjects=6, b0=0.0, b1=0.0, times=(0.0, 1.0, 2.0)):
    return build_cohort([
        (f"S{i}", 11.0, False, (0.0, 0.0),
         [(t, -1.35 + b0 + (0.3 + b1) * t) for t in times])
        for i in range(n_subjects)
    ])


class TestFitLme:
    def test_noiseless_exact_recovery(self):
        fit = fit_lme(line_cohort())
        assert fit.beta_hat[0] == pytest.approx(-1.35, abs=1e-6)
        assert fit.beta_hat[1] == pytest.approx(0.3, abs=1e-6)
        assert np.abs(fit.d_hat).max() < 1e-8

    def test_scenario_recovery(self):
        cohort = simgen.generate_scenario(simgen.scenario_1(2000), seed=11)
        fit = fit_lme(cohort)
        assert fit.beta_hat[0] == pytest.approx(-1.35, abs=0.05)
        assert fit.beta_hat[1] == pytest.approx(0.3, abs=0.05)
        assert fit.sigma_hat == pytest.approx(0.25, abs=0.02)

    def test_single_measurement_per_subject(self):
        cohort = build_cohort([
            (f"S{i}", 5.0, False, (0.0, 0.0), [(1.0, 0.5 + i)]) for i in range(5)
        ])
        with pytest.raises(NonIdentifiableError):
            fit_lme(cohort)

    def test_loglik_non_decreasing(self, s1_cohort_small):
        fit = fit_lme(s1_cohort_small)
        path = np.array(fit.loglik_path)
        assert len(path) > 3
        assert np.all(np.diff(path) >= -1e-9)

    def test_order_invariance(self, s1_cohort_small):
        fit_a = fit_lme(s1_cohort_small)
        shuffled = build_cohort([
            (s.subject_id, s.observed_time, s.event, s.covariates,
             list(zip(*s1_cohort_small.measurements_by_id[s.subject_id])))
            for s in reversed(s1_cohort_small.subjects)
        ])
        fit_b = fit_lme(shuffled)
        assert fit_a.beta_hat == pytest.approx(fit_b.beta_hat, rel=1e-12)
        assert fit_a.sigma_hat == pytest.approx(fit_b.sigma_hat, rel=1e-12)

    def test_psd_covariance(self, s1_cohort_small):
        fit = fit_lme(s1_cohort_small)
        eigs = np.linalg.eigvalsh(fit.d_hat)
        assert eigs.min() >= -1e-12
        assert fit.sigma_hat > 0

    def test_shrinkage_vs_subject_ols(self):
        # Empirical-Bayes intercepts shrink toward zero relative to raw
        # per-subject least-squares deviations, on average.
        rng = np.random.default_rng(4)
        specs = []
        for i in range(60):
            b0 = 0.27 * rng.standard_normal()
            meas = [(t, -1.35 + b0 + 0.3 * t + 0.25 * rng.standard_normal())
                    for t in (0.0, 1.0)]
            specs.append((f"S{i:02d}", 11.0, False, (0.0, 0.0), meas))
        cohort = build_cohort(specs)
        fit = fit_lme(cohort)
        shrunk, raw = [], []
        for sid in cohort.subject_ids:
            t, y = cohort.measurements_by_id[sid]
            slope = (y[1] - y[0]) / (t[1] - t[0])
            intercept = y[0] - slope * t[0]
            raw.append(abs(intercept - fit.beta_hat[0]))
            shrunk.append(abs(fit.b_hat[sid][0]))
        assert np.mean(shrunk) < np.mean(raw)


class TestPredictTrajectory:
    @pytest.fixture(scope="class")
    def fit(self):
        return fit_lme(line_cohort())

    def test_at_zero(self, fit):
        sid = "S0"
        expected = fit.beta_hat[0] + fit.b_hat[sid][0]
        assert predict_trajectory(fit, sid, 0.0) == pytest.approx(expected)

    def test_linearity(self, fit):
        sid = "S1"
        delta = predict_trajectory(fit, sid, 2.0) - predict_trajectory(fit, sid, 0.0)
        assert delta == pytest.approx(2 * (fit.beta_hat[1] + fit.b_hat[sid][1]))

    def test_population_line_when_effects_zero(self, fit):
        # Noiseless shared-line data: subject effects vanish.
        assert predict_trajectory(fit, "S2", 1.0) == pytest.approx(-1.05, abs=1e-6)

    def test_unknown_subject(self, fit):
        with pytest.raises(KeyError):
            predict_trajectory(fit, "nope", 1.0)
