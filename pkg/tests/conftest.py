import math

import numpy as np
import pytest

from jdp import jointfit, simgen
from jdp.dataset import Cohort, LongitudinalRecord, SurvivalRecord


def build_cohort(specs, schema=("w1", "w2")):
    """specs: list of (sid, observed_time, event, covariates, [(t, y), ...])."""
    subjects, measurements = [], []
    for sid, t_obs, event, covs, meas in specs:
        subjects.append(SurvivalRecord(sid, t_obs, event, tuple(covs)))
        measurements.extend(LongitudinalRecord(sid, t, y) for t, y in meas)
    return Cohort.build(schema, subjects, measurements)


@pytest.fixture
def tiny_cohort():
    return build_cohort([
        ("A1", 4.0, True, (0.1, -0.3), [(0.0, -1.3), (0.5, -1.2), (1.0, -1.1)]),
        ("B2", 2.5, False, (-0.4, 0.2), [(0.0, -1.5), (0.5, -1.4), (2.0, -0.9)]),
        ("C3", 6.0, True, (1.0, 0.8), [(0.0, -1.2), (1.0, -1.0), (3.0, -0.4)]),
    ])


@pytest.fixture(scope="session")
def s1_cohort_small():
    """Scenario-1 cohort, n=120; shared across tests that only read it."""
    return simgen.generate_scenario(simgen.scenario_1(120), seed=21)


def constant_hazard_fit(lam=0.4, n_draws=50, d=None, alpha=0.0,
                        gammas=(0.0, 0.0), sigma=0.25, beta=(-1.35, 0.3),
                        knots=(0.0, 2.0, 5.0, 8.0)):
    """Synthetic fit whose every draw has log h0 = log(lam) (flat spline)."""
    nb = jointfit.n_basis(len(knots), 3)
    if d is None:
        d = ((0.27**2, 0.2 * 0.27 * 0.08), (0.2 * 0.27 * 0.08, 0.08**2))
    cols = (
        ["beta0", "beta1", "gamma:w1", "gamma:w2", "alpha", "d00", "d01", "d11", "sigma"]
        + [f"h0:{q}" for q in range(nb + 1)]
    )
    row = [beta[0], beta[1], gammas[0], gammas[1], alpha,
           d[0][0], d[0][1], d[1][1], sigma, math.log(lam)] + [0.0] * nb
    return jointfit.JointModelFit(
        columns=tuple(cols), draws=np.array([row] * n_draws),
        random_effect_draws=None, subject_ids=("X",),
        covariate_names=("w1", "w2"), knots=knots, degree=3,
        spec=jointfit.JointModelSpec(), acceptance_rates={}, rhat_alpha=1.0,
    )
