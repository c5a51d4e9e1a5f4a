"""Dynamic survival prediction for a new subject from a fitted joint model.

For each retained posterior draw, a subject-specific random effect is drawn
from its conditional posterior given survival past the landmark and the
observed biomarker history (short Metropolis-Hastings run started at the
conditional-Gaussian mode), and the survival ratio S(u)/S(t) is the
exponential of minus the hazard integral over [t, u]. Because that integral
is taken directly on [t, u], every per-draw ratio lies in [0, 1] and equals
1 exactly at u = t; with a fixed seed the random-effect draws do not depend
on the horizon, so predictions at increasing horizons are monotone under
common random numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .jointfit import (
    JointModelFit,
    JointParams,
    basis_matrix,
    composite_nodes,
    n_basis,
)
from .seeds import rng_for

MH_STEPS = 25


@dataclass(frozen=True)
class PredictionRequest:
    """History up to the landmark plus the prediction horizon.

    `covariates` must align with the fit's covariate names. `history_times`
    may be empty (baseline-only prediction)."""

    history_times: tuple[float, ...]
    history_values: tuple[float, ...]
    covariates: tuple[float, ...]
    t: float
    u: float
    n_mc: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.u < self.t:
            raise ValueError(f"horizon u={self.u} must be >= landmark t={self.t}")
        if any(s > self.t + 1e-9 for s in self.history_times):
            raise ValueError("history contains measurements after the landmark t")
        if len(self.history_times) != len(self.history_values):
            raise ValueError("history times and values differ in length")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")


@dataclass(frozen=True)
class PredictionResult:
    pi_hat: float
    mc_std_error: float
    extrapolated: bool
    ratios: np.ndarray | None = None


class _NodeCache:
    """Quadrature nodes and basis designs for one (knots, t, u) pair; these
    do not depend on the parameter draw."""

    def __init__(self, knots, degree, t, u):
        self.nodes_t, self.weights_t = composite_nodes(knots, 0.0, t)
        self.basis_t = basis_matrix(knots, degree, self.nodes_t)
        if u > t:
            self.nodes_tu, self.weights_tu = composite_nodes(knots, t, u)
            self.basis_tu = basis_matrix(knots, degree, self.nodes_tu)
        else:
            self.nodes_tu = np.zeros(0)
            self.weights_tu = np.zeros(0)
            self.basis_tu = np.zeros((0, n_basis(len(knots), degree)))


def _hazard_integral(weights, lb_nodes, nodes, lin, alpha, a, c) -> float:
    if len(nodes) == 0:
        return 0.0
    return float(np.sum(weights * np.exp(lb_nodes + lin + alpha * (a + c * nodes))))


def _conditional_gaussian(times, resid, sigma2, d):
    """Mode and covariance of the random effects given the history only
    (survival factor excluded; it is handled by the MH correction)."""
    if len(times) == 0:
        return np.zeros(2), d
    ztz = np.array([
        [len(times), times.sum()],
        [times.sum(), float(times @ times)],
    ])
    zr = np.array([resid.sum(), float(times @ resid)])
    d_inv = np.linalg.inv(d)
    cov = np.linalg.inv(ztz / sigma2 + d_inv)
    cov = 0.5 * (cov + cov.T)
    return cov @ (zr / sigma2), cov


def _draw_b(beta, alpha, sigma, d, lin, lb_t, cache, times, resid, rng,
            n_steps=MH_STEPS):
    """One conditional-posterior draw of (b0, b1) via a short MH run from
    the conditional-Gaussian mode; target includes survival to t."""
    sigma2 = sigma * sigma
    mode, cov = _conditional_gaussian(times, resid, sigma2, d)
    chol = np.linalg.cholesky(cov) * (2.38 / math.sqrt(2.0))
    d_inv = np.linalg.inv(d)
    log_det_d = math.log(max(np.linalg.det(d), 1e-300))

    def log_target(b):
        a = beta[0] + b[0]
        c = beta[1] + b[1]
        h_t = _hazard_integral(cache.weights_t, lb_t, cache.nodes_t, lin, alpha, a, c)
        val = -h_t - 0.5 * float(b @ d_inv @ b) - 0.5 * log_det_d
        if len(times):
            dev = resid - b[0] - b[1] * times
            val -= 0.5 * float(dev @ dev) / sigma2
        return val

    b = mode.copy()
    lp = log_target(b)
    for _ in range(n_steps):
        prop = b + chol @ rng.standard_normal(2)
        lp_prop = log_target(prop)
        if math.log(rng.random() + 1e-300) < lp_prop - lp:
            b, lp = prop, lp_prop
    return b


def sample_subject_effects(params: JointParams, request: PredictionRequest,
                           rng: np.random.Generator) -> tuple[float, float]:
    """Draw random effects for a new subject conditional on survival past
    the landmark and the observed history, under one parameter point."""
    cache = _NodeCache(params.spline.knots, params.spline.degree, request.t, request.t)
    coefs = np.asarray(params.spline.coefficients)
    lb_t = coefs[0] + cache.basis_t @ coefs[1:]
    times = np.asarray(request.history_times, dtype=float)
    values = np.asarray(request.history_values, dtype=float)
    resid = values - params.beta[0] - params.beta[1] * times
    lin = float(np.dot(params.gamma, request.covariates))
    b = _draw_b(params.beta, params.alpha, params.sigma, params.d, lin, lb_t,
                cache, times, resid, rng)
    return float(b[0]), float(b[1])


def predict_survival(fit: JointModelFit, request: PredictionRequest,
                     keep_draws: bool = False) -> PredictionResult:
    """Monte-Carlo posterior predictive survival probability pi(u | t).

    Cycles over retained parameter draws, redraws the subject's random
    effects per draw, and averages the per-draw survival ratios. Horizons
    beyond the baseline-spline span are still computed, with flat
    log-hazard extrapolation, and flagged in the result.
    """
    if len(request.covariates) != len(fit.covariate_names):
        raise ValueError(
            f"expected {len(fit.covariate_names)} covariates "
            f"({', '.join(fit.covariate_names)}), got {len(request.covariates)}"
        )
    knots = fit.knots
    cache = _NodeCache(knots, fit.degree, request.t, request.u)
    extrapolated = request.u > knots[-1] + 1e-12

    cols = fit.columns
    idx = {name: j for j, name in enumerate(cols)}
    beta0 = fit.draws[:, idx["beta0"]]
    beta1 = fit.draws[:, idx["beta1"]]
    alphas = fit.draws[:, idx["alpha"]]
    sigmas = fit.draws[:, idx["sigma"]]
    d00 = fit.draws[:, idx["d00"]]
    d01 = fit.draws[:, idx["d01"]]
    d11 = fit.draws[:, idx["d11"]]
    gam = np.column_stack([fit.draws[:, idx[f"gamma:{c}"]] for c in fit.covariate_names]) \
        if fit.covariate_names else np.zeros((fit.n_draws, 0))
    nb = n_basis(len(knots), fit.degree)
    i0 = idx["h0:0"]
    coef_mat = fit.draws[:, i0:i0 + nb + 1]

    times = np.asarray(request.history_times, dtype=float)
    values = np.asarray(request.history_values, dtype=float)
    w = np.asarray(request.covariates, dtype=float)
    lin_all = gam @ w if gam.shape[1] else np.zeros(fit.n_draws)

    ratios = np.empty(request.n_mc)
    n_draws = fit.n_draws
    with np.errstate(over="ignore", under="ignore"):
        for l in range(request.n_mc):
            j = l % n_draws
            rng = rng_for("dynpred", request.seed, l)
            beta = (beta0[j], beta1[j])
            d = np.array([[d00[j], d01[j]], [d01[j], d11[j]]])
            coefs = coef_mat[j]
            lb_t = coefs[0] + cache.basis_t @ coefs[1:]
            resid = values - beta[0] - beta[1] * times
            b = _draw_b(beta, alphas[j], sigmas[j], d, lin_all[j], lb_t,
                        cache, times, resid, rng)
            if request.u == request.t:
                ratios[l] = 1.0
                continue
            lb_tu = coefs[0] + cache.basis_tu @ coefs[1:]
            h_tu = _hazard_integral(
                cache.weights_tu, lb_tu, cache.nodes_tu, lin_all[j],
                alphas[j], beta[0] + b[0], beta[1] + b[1],
            )
            ratios[l] = math.exp(-h_tu) if np.isfinite(h_tu) else 0.0
    pi_hat = float(ratios.mean())
    se = float(ratios.std(ddof=1) / math.sqrt(request.n_mc)) if request.n_mc > 1 else 0.0
    return PredictionResult(
        pi_hat=pi_hat, mc_std_error=se, extrapolated=bool(extrapolated),
        ratios=ratios.copy() if keep_draws else None,
    )
