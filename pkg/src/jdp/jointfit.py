"""Bayesian joint model: linear trajectory linked to a proportional-hazards
event model with a B-spline log baseline hazard.

Estimation is adaptive random-walk Metropolis within Gibbs over the blocks
(trajectory fixed effects), (covariate coefficients + association +
compensating baseline intercept), (baseline spline coefficients),
(variance components on unconstrained scales), and per-subject random
effects. Step sizes follow Robbins-Monro recursions toward 0.234 (0.44 for
scalar blocks) during burn-in only, so the post-burn-in kernel is fixed.
Cumulative hazards use 15-node Gauss-Legendre quadrature on [0, T_i]; the
basis design matrices at the quadrature nodes do not depend on the
parameters and are computed once per fit.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .dataset import Cohort
from .lme import LmeConvergenceError, NonIdentifiableError, fit_lme
from .seeds import rng_for

MIN_SUBJECTS = 30
_GL_X, _GL_W = np.polynomial.legendre.leggauss(15)
_LOG_2PI = float(np.log(2.0 * np.pi))


class JointFitInfeasibleError(RuntimeError):
    """The joint model cannot be fit on this cohort (tuners treat the
    associated grid entry as infeasible rather than failing the run)."""


class TooFewSubjectsError(JointFitInfeasibleError):
    pass


# --------------------------------------------------------------------------
# baseline hazard spline
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineHazardSpline:
    """log h0(t) = intercept + sum_q coef_q * B_q(t) on a clamped B-spline
    basis over `knots` (strictly increasing breakpoints spanning the
    observed-time range). coefficients[0] is the intercept; the remaining
    len(knots) + degree - 2 entries weight the basis functions, which form
    a partition of unity on the span. Evaluation outside the span clamps to
    the boundary (flat log-hazard extrapolation)."""

    knots: tuple[float, ...]
    degree: int
    coefficients: tuple[float, ...]

    def __post_init__(self):
        if len(self.knots) < 2 or any(
            b <= a for a, b in zip(self.knots, self.knots[1:])
        ):
            raise ValueError("knots must be >= 2 strictly increasing values")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        expect = n_basis(len(self.knots), self.degree) + 1
        if len(self.coefficients) != expect:
            raise ValueError(
                f"need {expect} coefficients (intercept + basis), got "
                f"{len(self.coefficients)}"
            )

    @property
    def span(self) -> tuple[float, float]:
        return self.knots[0], self.knots[-1]


def n_basis(n_knots: int, degree: int) -> int:
    return n_knots + degree - 1


def _padded_knots(knots, degree: int) -> np.ndarray:
    k = np.asarray(knots, dtype=float)
    return np.concatenate([np.full(degree, k[0]), k, np.full(degree, k[-1])])


def basis_matrix(knots, degree: int, times) -> np.ndarray:
    """Clamped B-spline design matrix at `times`; times outside the span
    are clamped to the boundary first."""
    t = _padded_knots(knots, degree)
    x = np.clip(np.atleast_1d(np.asarray(times, dtype=float)), knots[0], knots[-1])
    return BSpline.design_matrix(x, t, degree).toarray()


def log_baseline_hazard(spline: BaselineHazardSpline, t) -> float | np.ndarray:
    """Intercept plus coefficient-weighted basis at t (flat beyond span)."""
    design = basis_matrix(spline.knots, spline.degree, t)
    coefs = np.asarray(spline.coefficients)
    out = coefs[0] + design @ coefs[1:]
    return float(out[0]) if np.isscalar(t) or np.ndim(t) == 0 else out


def default_knots(cohort: Cohort, n_internal: int = 5) -> tuple[float, ...]:
    """Internal knots at event-time quantiles {1/(Q+1)..Q/(Q+1)}, boundaries
    at 0 and the maximum observed time; falls back to all observed times
    when there are too few events for distinct quantiles."""
    times = cohort.observed_times
    events = times[cohort.event_flags]
    source = events if len(events) > n_internal else times
    upper = float(times.max())
    qs = np.quantile(source, [(q + 1) / (n_internal + 1) for q in range(n_internal)])
    knots = [0.0]
    for q in sorted(qs):
        if q > knots[-1] + 1e-9 * max(upper, 1.0) and q < upper - 1e-9 * max(upper, 1.0):
            knots.append(float(q))
    knots.append(upper)
    return tuple(knots)


# --------------------------------------------------------------------------
# configuration and fit containers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class McmcConfig:
    n_iterations: int = 3500
    n_burnin: int = 1500
    n_thin: int = 2
    n_chains: int = 2
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.n_burnin < self.n_iterations):
            raise ValueError("need 0 <= n_burnin < n_iterations")
        if self.n_thin < 1 or self.n_chains < 1:
            raise ValueError("n_thin and n_chains must be >= 1")

    @property
    def n_retained(self) -> int:
        return self.n_chains * ((self.n_iterations - self.n_burnin) // self.n_thin)


@dataclass(frozen=True)
class JointModelSpec:
    n_internal_knots: int = 5
    degree: int = 3
    covariates: tuple[str, ...] | None = None   # None = all cohort covariates
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    fix_alpha: float | None = None              # hold the association fixed


@dataclass(frozen=True)
class JointModelFit:
    """Posterior draws (rows) over the documented columns, plus per-subject
    random-effect draws aligned with `subject_ids`."""

    columns: tuple[str, ...]
    draws: np.ndarray                       # (n_draws, n_cols)
    random_effect_draws: np.ndarray | None  # (n_draws, n_subjects, 2)
    subject_ids: tuple[str, ...]
    covariate_names: tuple[str, ...]
    knots: tuple[float, ...]
    degree: int
    spec: JointModelSpec
    acceptance_rates: dict[str, float]
    rhat_alpha: float

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.columns.index(name)]

    def posterior_mean(self, name: str) -> float:
        return float(self.column(name).mean())

    def spline_at(self, draw: int) -> BaselineHazardSpline:
        i0 = self.columns.index("h0:0")
        nb = n_basis(len(self.knots), self.degree)
        return BaselineHazardSpline(
            self.knots, self.degree, tuple(self.draws[draw, i0:i0 + nb + 1])
        )

    def mean_spline(self) -> BaselineHazardSpline:
        i0 = self.columns.index("h0:0")
        nb = n_basis(len(self.knots), self.degree)
        return BaselineHazardSpline(
            self.knots, self.degree, tuple(self.draws[:, i0:i0 + nb + 1].mean(axis=0))
        )


@dataclass(frozen=True)
class JointParams:
    """One parameter point; convenient for scalar likelihood evaluation."""

    beta: tuple[float, float]
    gamma: tuple[float, ...]
    alpha: float
    d: np.ndarray
    sigma: float
    spline: BaselineHazardSpline


def params_at(fit: JointModelFit, draw: int) -> JointParams:
    g = tuple(fit.column(f"gamma:{name}")[draw] for name in fit.covariate_names)
    d = np.array([
        [fit.column("d00")[draw], fit.column("d01")[draw]],
        [fit.column("d01")[draw], fit.column("d11")[draw]],
    ])
    return JointParams(
        beta=(float(fit.column("beta0")[draw]), float(fit.column("beta1")[draw])),
        gamma=g,
        alpha=float(fit.column("alpha")[draw]),
        d=d,
        sigma=float(fit.column("sigma")[draw]),
        spline=fit.spline_at(draw),
    )


# --------------------------------------------------------------------------
# likelihood pieces
# --------------------------------------------------------------------------

def gauss_legendre_nodes(lo, hi):
    """15-node Gauss-Legendre nodes and weights on [lo, hi] (vectorized over
    array bounds: returns (..., 15) arrays)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    half = (hi - lo) / 2.0
    mid = (hi + lo) / 2.0
    nodes = mid[..., None] + half[..., None] * _GL_X
    weights = half[..., None] * _GL_W
    return nodes, weights


def composite_nodes(knots, lower: float, upper: float):
    """15-node Gauss-Legendre panels split at the spline knots.

    The log baseline hazard is only piecewise smooth across knots, so a
    single global panel stalls at ~1e-2 relative error; panelling at the
    knots restores near-machine accuracy while keeping the 15-node rule.
    Returns flat (nodes, weights) arrays covering [lower, upper].
    """
    if upper < lower:
        raise ValueError("upper must be >= lower")
    cuts = [lower] + [float(k) for k in knots if lower < k < upper] + [upper]
    los = np.array(cuts[:-1])
    his = np.array(cuts[1:])
    nodes, weights = gauss_legendre_nodes(los, his)
    return nodes.reshape(-1), weights.reshape(-1)


def cumulative_hazard(params: JointParams, w, b, upper: float, lower: float = 0.0) -> float:
    """Integral of h0(s) exp{gamma'w + alpha m(s)} over [lower, upper] by
    knot-panelled 15-node Gauss-Legendre; the same rule the sampler uses."""
    if upper == lower:
        return 0.0
    nodes, weights = composite_nodes(params.spline.knots, lower, upper)
    lb = log_baseline_hazard(params.spline, nodes)
    m = (params.beta[0] + b[0]) + (params.beta[1] + b[1]) * nodes
    lin = float(np.dot(params.gamma, w))
    return float(np.sum(weights * np.exp(lb + lin + params.alpha * m)))


def subject_log_likelihood(
    params: JointParams, b, times, values, w, observed_time: float, event: bool
) -> float:
    """Full per-subject contribution: event/censoring term, trajectory
    likelihood, and the random-effect prior density."""
    b = np.asarray(b, dtype=float)
    h_term = -cumulative_hazard(params, w, b, observed_time)
    if event:
        m_t = (params.beta[0] + b[0]) + (params.beta[1] + b[1]) * observed_time
        h_term += (
            log_baseline_hazard(params.spline, observed_time)
            + float(np.dot(params.gamma, w))
            + params.alpha * m_t
        )
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    y_term = 0.0
    if len(times):
        mean = (params.beta[0] + b[0]) + (params.beta[1] + b[1]) * times
        y_term = -0.5 * float(
            len(times) * (_LOG_2PI + 2.0 * math.log(params.sigma))
            + np.sum((values - mean) ** 2) / params.sigma**2
        )
    det = float(np.linalg.det(params.d))
    quad = float(b @ np.linalg.solve(params.d, b))
    b_term = -_LOG_2PI - 0.5 * math.log(det) - 0.5 * quad
    return h_term + y_term + b_term


# --------------------------------------------------------------------------
# the sampler
# --------------------------------------------------------------------------

_TARGET_MULTI = 0.234
_TARGET_SCALAR = 0.44


def _rm_gain(k: int) -> float:
    return min(0.25, (k + 1) ** -0.5)


class _Blocks:
    """Mutable chain state with cached likelihood components."""

    def __init__(self, data, init, rng, fix_alpha):
        self.d_ = data
        self.rng = rng
        self.fix_alpha = fix_alpha
        self.beta = init["beta"].copy()
        self.gamma = init["gamma"].copy()
        self.alpha = float(init["alpha"])
        self.coefs = init["coefs"].copy()
        self.eta = init["eta"].copy()
        self.b = init["b"].copy()
        self.mbar = float(init["mbar"])
        # proposal scales (log): adapted during burn-in
        self.lstep = {"beta": math.log(0.05), "gam": math.log(0.1),
                      "coef": math.log(0.1), "eta": math.log(0.1)}
        self.lstep_b = np.full(data["n"], math.log(0.5))
        self.prop_chol_b = init["prop_chol_b"]
        self.accept = {k: 0 for k in ("beta", "gam", "coef", "eta", "b")}
        self.tries = {k: 0 for k in ("beta", "gam", "coef", "eta", "b")}
        self._ws = np.empty_like(data["s_nodes"])
        self._refresh_caches()

    # --- parameter transforms -------------------------------------------
    def _var_params(self, eta):
        tau0, tau1 = math.exp(eta[0]), math.exp(eta[1])
        rho = math.tanh(eta[2])
        sigma = math.exp(eta[3])
        return tau0, tau1, rho, sigma

    def d_matrix(self, eta=None):
        tau0, tau1, rho, _ = self._var_params(self.eta if eta is None else eta)
        off = rho * tau0 * tau1
        return np.array([[tau0 * tau0, off], [off, tau1 * tau1]])

    # --- cached components ----------------------------------------------
    def _refresh_caches(self):
        d = self.d_
        self.lb_nodes = self.coefs[0] + d["b_nodes"] @ self.coefs[1:]
        self.lb_t = self.coefs[0] + d["b_obs"] @ self.coefs[1:]
        self.cov_eff = d["w"] @ self.gamma
        self.sv = self._surv_ll(self.beta, self.b, self.alpha, self.cov_eff,
                                self.lb_nodes, self.lb_t)
        self.yll = self._y_ll(self.beta, self.b, self.sigma2())
        self.bp = self._b_prior(self.b, self.eta)

    def sigma2(self, eta=None):
        return math.exp(2.0 * (self.eta if eta is None else eta)[3])

    def _surv_ll(self, beta, b, alpha, cov_eff, lb_nodes, lb_t):
        d = self.d_
        a = beta[0] + b[:, 0]
        c = beta[1] + b[:, 1]
        ws = self._ws
        np.multiply(d["s_nodes"], (alpha * c)[:, None], out=ws)
        ws += lb_nodes
        ws += (cov_eff + alpha * a)[:, None]
        np.exp(ws, out=ws)
        ws *= d["s_weights"]
        h = ws.sum(axis=1)
        log_h_t = lb_t + cov_eff + alpha * (a + c * d["t_obs"])
        out = d["delta"] * log_h_t - h
        out[~np.isfinite(out)] = -np.inf
        return out

    def _y_ll(self, beta, b, sigma2):
        d = self.d_
        a = beta[0] + b[:, 0]
        c = beta[1] + b[:, 1]
        ssr = (d["syy"] - 2 * a * d["sy"] - 2 * c * d["sty"]
               + a * a * d["ny"] + 2 * a * c * d["st"] + c * c * d["stt"])
        return -0.5 * (d["ny"] * (_LOG_2PI + math.log(sigma2)) + ssr / sigma2)

    def _b_prior(self, b, eta):
        tau0, tau1, rho, _ = self._var_params(eta)
        det = (tau0 * tau1) ** 2 * (1.0 - rho * rho)
        det = max(det, 1e-300)
        # inverse of [[t0^2, r t0 t1], [r t0 t1, t1^2]]
        i00 = tau1 * tau1 / det
        i11 = tau0 * tau0 / det
        i01 = -rho * tau0 * tau1 / det
        quad = i00 * b[:, 0] ** 2 + 2 * i01 * b[:, 0] * b[:, 1] + i11 * b[:, 1] ** 2
        return -_LOG_2PI - 0.5 * math.log(det) - 0.5 * quad

    # --- log priors -------------------------------------------------------
    @staticmethod
    def _normal_prior(x, sd=10.0):
        if np.ndim(x) == 0:
            return -0.5 * float(x) ** 2 / (sd * sd)
        return -0.5 * float(x @ x) / (sd * sd)

    def _coef_prior(self, coefs):
        base = self._normal_prior(coefs)
        steps = coefs[2:] - coefs[1:-1]
        walk = -0.5 * float(steps @ steps)
        return base + walk

    def _eta_prior(self, eta):
        tau0, tau1, rho, sigma = self._var_params(eta)
        half_normals = -(tau0**2 + tau1**2 + sigma**2) / 50.0
        jac = eta[0] + eta[1] + eta[3] + math.log1p(-rho * rho)
        return half_normals + jac

    # --- metropolis blocks -------------------------------------------------
    def _accept_prob(self, delta):
        if not np.isfinite(delta):
            return 0.0
        return min(1.0, math.exp(min(delta, 0.0)) if delta < 0 else 1.0)

    def _rm(self, name, acc_prob, k, adapting, target=_TARGET_MULTI):
        self.tries[name] += 1
        if adapting:
            self.lstep[name] += _rm_gain(k) * (acc_prob - target)

    def update_beta(self, k, adapting):
        step = math.exp(self.lstep["beta"])
        z = self.rng.standard_normal(2)
        z[1] *= 0.4  # slope moves on a tighter natural scale
        prop = self.beta + step * z
        sv = self._surv_ll(prop, self.b, self.alpha, self.cov_eff,
                           self.lb_nodes, self.lb_t)
        yll = self._y_ll(prop, self.b, self.sigma2())
        delta = (sv.sum() + yll.sum() + self._normal_prior(prop)
                 - self.sv.sum() - self.yll.sum() - self._normal_prior(self.beta))
        acc = self._accept_prob(delta)
        if self.rng.random() < acc:
            self.beta, self.sv, self.yll = prop, sv, yll
            self.accept["beta"] += 1
        self._rm("beta", acc, k, adapting)

    def update_gamma_alpha(self, k, adapting):
        """Covariate coefficients and association, with a compensating shear
        on the baseline intercept to follow the alpha/intercept ridge."""
        p = len(self.gamma)
        step = math.exp(self.lstep["gam"])
        z = self.rng.standard_normal(p + (0 if self.fix_alpha is not None else 1) + 1)
        gam_prop = self.gamma + step * z[:p]
        if self.fix_alpha is None:
            alpha_prop = self.alpha + step * z[p]
            dalpha = alpha_prop - self.alpha
        else:
            alpha_prop, dalpha = self.alpha, 0.0
        coefs_prop = self.coefs.copy()
        coefs_prop[0] += 0.25 * step * z[-1] - self.mbar * dalpha
        lb_nodes = self.lb_nodes + (coefs_prop[0] - self.coefs[0])
        lb_t = self.lb_t + (coefs_prop[0] - self.coefs[0])
        cov_eff = self.d_["w"] @ gam_prop
        sv = self._surv_ll(self.beta, self.b, alpha_prop, cov_eff, lb_nodes, lb_t)
        delta = (sv.sum() + self._normal_prior(gam_prop)
                 + self._normal_prior(alpha_prop) + self._coef_prior(coefs_prop)
                 - self.sv.sum() - self._normal_prior(self.gamma)
                 - self._normal_prior(self.alpha) - self._coef_prior(self.coefs))
        acc = self._accept_prob(delta)
        if self.rng.random() < acc:
            self.gamma, self.alpha, self.coefs = gam_prop, alpha_prop, coefs_prop
            self.cov_eff, self.sv = cov_eff, sv
            self.lb_nodes, self.lb_t = lb_nodes, lb_t
            self.accept["gam"] += 1
        target = _TARGET_SCALAR if len(z) == 1 else _TARGET_MULTI
        self._rm("gam", acc, k, adapting, target)

    def update_coefs(self, k, adapting):
        d = self.d_
        step = math.exp(self.lstep["coef"])
        prop = self.coefs + step * self.rng.standard_normal(len(self.coefs))
        lb_nodes = prop[0] + d["b_nodes"] @ prop[1:]
        lb_t = prop[0] + d["b_obs"] @ prop[1:]
        sv = self._surv_ll(self.beta, self.b, self.alpha, self.cov_eff, lb_nodes, lb_t)
        delta = (sv.sum() + self._coef_prior(prop)
                 - self.sv.sum() - self._coef_prior(self.coefs))
        acc = self._accept_prob(delta)
        if self.rng.random() < acc:
            self.coefs, self.lb_nodes, self.lb_t, self.sv = prop, lb_nodes, lb_t, sv
            self.accept["coef"] += 1
        self._rm("coef", acc, k, adapting)

    def update_eta(self, k, adapting):
        step = math.exp(self.lstep["eta"])
        prop = self.eta + step * self.rng.standard_normal(4)
        yll = self._y_ll(self.beta, self.b, self.sigma2(prop))
        bp = self._b_prior(self.b, prop)
        delta = (yll.sum() + bp.sum() + self._eta_prior(prop)
                 - self.yll.sum() - self.bp.sum() - self._eta_prior(self.eta))
        acc = self._accept_prob(delta)
        if self.rng.random() < acc:
            self.eta, self.yll, self.bp = prop, yll, bp
            self.accept["eta"] += 1
        self._rm("eta", acc, k, adapting)

    def update_b(self, k, adapting):
        d = self.d_
        n = d["n"]
        z = self.rng.standard_normal((n, 2))
        steps = np.exp(self.lstep_b)[:, None]
        prop = self.b + steps * np.einsum("nij,nj->ni", self.prop_chol_b, z)
        sv = self._surv_ll(self.beta, prop, self.alpha, self.cov_eff,
                           self.lb_nodes, self.lb_t)
        yll = self._y_ll(self.beta, prop, self.sigma2())
        bp = self._b_prior(prop, self.eta)
        delta = (sv + yll + bp) - (self.sv + self.yll + self.bp)
        acc_prob = np.exp(np.minimum(delta, 0.0))
        acc_prob[~np.isfinite(delta)] = 0.0
        take = self.rng.random(n) < acc_prob
        if np.any(take):
            self.b[take] = prop[take]
            self.sv = np.where(take, sv, self.sv)
            self.yll = np.where(take, yll, self.yll)
            self.bp = np.where(take, bp, self.bp)
        self.accept["b"] += float(take.mean())
        self.tries["b"] += 1
        if adapting:
            self.lstep_b += _rm_gain(k) * (acc_prob - _TARGET_MULTI)

    def sweep(self, k, adapting):
        self.update_beta(k, adapting)
        self.update_gamma_alpha(k, adapting)
        self.update_coefs(k, adapting)
        self.update_eta(k, adapting)
        self.update_b(k, adapting)


def _prepare_data(cohort: Cohort, covariate_names, knots, degree):
    n = cohort.n_subjects
    t_obs = cohort.observed_times
    # Shared panel grid: every subject integrates the same knot panels with
    # the panel upper bound clipped at its own observed time, so dead panels
    # simply carry zero weight and everything stays rectangular.
    lows = np.asarray(knots[:-1])
    highs = np.asarray(knots[1:])
    eff_hi = np.minimum(t_obs[:, None], highs[None, :])
    eff_hi = np.maximum(eff_hi, lows[None, :])
    half = (eff_hi - lows[None, :]) / 2.0
    mid = (eff_hi + lows[None, :]) / 2.0
    s_nodes = (mid[:, :, None] + half[:, :, None] * _GL_X).reshape(n, -1)
    s_weights = (half[:, :, None] * _GL_W).reshape(n, -1)
    cov_idx = [cohort.schema.index(c) for c in covariate_names]
    w = cohort.covariate_matrix[:, cov_idx]
    stats = {k: np.zeros(n) for k in ("ny", "st", "stt", "sy", "sty", "syy")}
    for i, sid in enumerate(cohort.subject_ids):
        t, y = cohort.measurements_by_id[sid]
        stats["ny"][i] = len(t)
        stats["st"][i] = t.sum()
        stats["stt"][i] = (t * t).sum()
        stats["sy"][i] = y.sum()
        stats["sty"][i] = (t * y).sum()
        stats["syy"][i] = (y * y).sum()
    n_nodes = s_nodes.shape[1]
    b_nodes = basis_matrix(knots, degree, s_nodes.reshape(-1)).reshape(n, n_nodes, -1)
    b_obs = basis_matrix(knots, degree, t_obs)
    return {
        "n": n, "t_obs": t_obs, "delta": cohort.event_flags.astype(float),
        "w": w, "s_nodes": s_nodes, "s_weights": s_weights,
        "b_nodes": b_nodes, "b_obs": b_obs, **stats,
    }


def _initial_values(cohort: Cohort, data, knots, degree, fix_alpha):
    try:
        lme_fit = fit_lme(cohort)
    except (NonIdentifiableError, LmeConvergenceError) as exc:
        raise JointFitInfeasibleError(f"trajectory initialization failed: {exc}") from exc
    beta = np.array(lme_fit.beta_hat)
    b = np.array([lme_fit.b_hat[sid] for sid in cohort.subject_ids])
    d_hat = lme_fit.d_hat
    tau0 = math.sqrt(max(d_hat[0, 0], 1e-8))
    tau1 = math.sqrt(max(d_hat[1, 1], 1e-8))
    rho = float(np.clip(d_hat[0, 1] / (tau0 * tau1), -0.99, 0.99))
    eta = np.array([
        math.log(tau0), math.log(tau1), math.atanh(rho),
        math.log(max(lme_fit.sigma_hat, 1e-6)),
    ])

    # Crude Weibull moment fit of the marginal event times for the baseline
    # spline start: match the mean and coefficient of variation of the
    # uncensored times, then project log(lam*v*t^(v-1)) onto the basis.
    events = data["t_obs"][data["delta"] > 0]
    if len(events) >= 5 and events.std() > 0:
        cv2 = (events.std() / events.mean()) ** 2
        v = 1.0
        for _ in range(40):  # bisection-free fixed point on the CV equation
            g1 = math.gamma(1.0 + 1.0 / v)
            g2 = math.gamma(1.0 + 2.0 / v)
            cv2_v = g2 / g1**2 - 1.0
            v *= (cv2_v / cv2) ** 0.2
            v = min(max(v, 0.2), 10.0)
        lam_scale = events.mean() / math.gamma(1.0 + 1.0 / v)
        rate = lam_scale ** -v
    else:
        v = 1.0
        rate = max(float(data["delta"].sum()), 1.0) / float(data["t_obs"].sum())
    grid = np.linspace(knots[0] + 1e-3 * (knots[-1] - knots[0]), knots[-1], 60)
    target = np.log(rate * v) + (v - 1.0) * np.log(grid)
    design = np.column_stack([np.ones_like(grid), basis_matrix(knots, degree, grid)])
    coefs, *_ = np.linalg.lstsq(design, target, rcond=None)

    alpha0 = fix_alpha if fix_alpha is not None else 0.0
    # Average trajectory value at the observed times: the shear constant for
    # the alpha/baseline-intercept ridge.
    mbar = float(np.mean(beta[0] + b[:, 0] + (beta[1] + b[:, 1]) * data["t_obs"]))

    sigma2 = max(lme_fit.sigma_hat, 1e-6) ** 2
    d_init = np.array([[tau0**2, rho * tau0 * tau1], [rho * tau0 * tau1, tau1**2]])
    d_inv = np.linalg.inv(d_init)
    prop_chol = np.empty((data["n"], 2, 2))
    for i in range(data["n"]):
        zz = np.array([
            [data["ny"][i], data["st"][i]],
            [data["st"][i], data["stt"][i]],
        ])
        cond = np.linalg.inv(zz / sigma2 + d_inv)
        prop_chol[i] = np.linalg.cholesky(cond) * (2.38 / math.sqrt(2.0))
    return {
        "beta": beta, "gamma": np.zeros(data["w"].shape[1]), "alpha": alpha0,
        "coefs": coefs, "eta": eta, "b": b, "mbar": mbar, "prop_chol_b": prop_chol,
    }


def _split_rhat(chains: list[np.ndarray]) -> float:
    """Potential scale reduction over split half-chains."""
    halves = []
    for ch in chains:
        m = len(ch) // 2
        if m < 2:
            return float("nan")
        halves.extend([ch[:m], ch[m:2 * m]])
    arr = np.array(halves, dtype=float)
    m, n = arr.shape
    means = arr.mean(axis=1)
    bvar = n * means.var(ddof=1)
    wvar = arr.var(axis=1, ddof=1).mean()
    if wvar <= 0:
        return 1.0
    var_plus = (n - 1) / n * wvar + bvar / n
    return float(math.sqrt(var_plus / wvar))


def fit_joint(cohort: Cohort, spec: JointModelSpec | None = None) -> JointModelFit:
    """Fit the joint model; deterministic given (spec.mcmc.seed, chain).

    Raises `TooFewSubjectsError` below 30 subjects and wraps trajectory
    initialization failures in `JointFitInfeasibleError`, which tuning
    layers interpret as an infeasible grid entry. Emits a non-convergence
    warning when the split-chain potential scale reduction of the
    association parameter exceeds 1.1.
    """
    spec = spec or JointModelSpec()
    if cohort.n_subjects < MIN_SUBJECTS:
        raise TooFewSubjectsError(
            f"joint model needs >= {MIN_SUBJECTS} subjects, got {cohort.n_subjects}"
        )
    covariate_names = tuple(spec.covariates) if spec.covariates else cohort.schema
    unknown = set(covariate_names) - set(cohort.schema)
    if unknown:
        raise ValueError(f"unknown covariates: {sorted(unknown)}")
    knots = default_knots(cohort, spec.n_internal_knots)
    data = _prepare_data(cohort, covariate_names, knots, spec.degree)
    init = _initial_values(cohort, data, knots, spec.degree, spec.fix_alpha)

    mc = spec.mcmc
    keep_per_chain = (mc.n_iterations - mc.n_burnin) // mc.n_thin
    nb = n_basis(len(knots), spec.degree)
    columns = (
        ["beta0", "beta1"]
        + [f"gamma:{c}" for c in covariate_names]
        + ["alpha", "d00", "d01", "d11", "sigma"]
        + [f"h0:{q}" for q in range(nb + 1)]
    )
    all_draws = []
    all_b_draws = []
    alpha_chains = []
    acc_totals: dict[str, float] = {}
    for chain in range(mc.n_chains):
        rng = rng_for("jointfit", mc.seed, chain)
        state = _Blocks(data, init, rng, spec.fix_alpha)
        draws = np.empty((keep_per_chain, len(columns)))
        b_draws = np.empty((keep_per_chain, data["n"], 2))
        kept = 0
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            for k in range(mc.n_iterations):
                state.sweep(k + 1, adapting=k < mc.n_burnin)
                if k >= mc.n_burnin and (k - mc.n_burnin) % mc.n_thin == 0 and kept < keep_per_chain:
                    tau0, tau1, rho, sigma = state._var_params(state.eta)
                    draws[kept] = np.concatenate([
                        state.beta, state.gamma,
                        [state.alpha, tau0**2, rho * tau0 * tau1, tau1**2, sigma],
                        state.coefs,
                    ])
                    b_draws[kept] = state.b
                    kept += 1
        all_draws.append(draws[:kept])
        all_b_draws.append(b_draws[:kept])
        alpha_chains.append(draws[:kept, columns.index("alpha")])
        for name in state.tries:
            acc_totals[name] = acc_totals.get(name, 0.0) + state.accept[name] / max(
                state.tries[name], 1
            )
    draws = np.concatenate(all_draws, axis=0)
    b_draws = np.concatenate(all_b_draws, axis=0)
    acceptance = {k: v / mc.n_chains for k, v in acc_totals.items()}
    rhat = _split_rhat(alpha_chains) if spec.fix_alpha is None else 1.0
    if spec.fix_alpha is None and np.isfinite(rhat) and rhat > 1.1:
        warnings.warn(
            f"association parameter may not have converged: split-chain "
            f"Rhat = {rhat:.3f} > 1.1",
            RuntimeWarning,
        )
    return JointModelFit(
        columns=tuple(columns), draws=draws, random_effect_draws=b_draws,
        subject_ids=cohort.subject_ids, covariate_names=covariate_names,
        knots=knots, degree=spec.degree, spec=spec,
        acceptance_rates=acceptance, rhat_alpha=float(rhat),
    )


# --------------------------------------------------------------------------
# serialization (theta draws only; random-effect draws are fit-internal)
# --------------------------------------------------------------------------

def save_fit(fit: JointModelFit, path) -> None:
    payload = {
        "columns": list(fit.columns),
        "draws": fit.draws.tolist(),
        "covariate_names": list(fit.covariate_names),
        "knots": list(fit.knots),
        "degree": fit.degree,
        "subject_ids": list(fit.subject_ids),
        "acceptance_rates": fit.acceptance_rates,
        "rhat_alpha": fit.rhat_alpha,
        "spec": {
            "n_internal_knots": fit.spec.n_internal_knots,
            "degree": fit.spec.degree,
            "covariates": list(fit.spec.covariates) if fit.spec.covariates else None,
            "fix_alpha": fit.spec.fix_alpha,
            "mcmc": {
                "n_iterations": fit.spec.mcmc.n_iterations,
                "n_burnin": fit.spec.mcmc.n_burnin,
                "n_thin": fit.spec.mcmc.n_thin,
                "n_chains": fit.spec.mcmc.n_chains,
                "seed": fit.spec.mcmc.seed,
            },
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_fit(path) -> JointModelFit:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    spec = JointModelSpec(
        n_internal_knots=payload["spec"]["n_internal_knots"],
        degree=payload["spec"]["degree"],
        covariates=tuple(payload["spec"]["covariates"]) if payload["spec"]["covariates"] else None,
        mcmc=McmcConfig(**payload["spec"]["mcmc"]),
        fix_alpha=payload["spec"]["fix_alpha"],
    )
    return JointModelFit(
        columns=tuple(payload["columns"]),
        draws=np.array(payload["draws"], dtype=float),
        random_effect_draws=None,
        subject_ids=tuple(payload["subject_ids"]),
        covariate_names=tuple(payload["covariate_names"]),
        knots=tuple(payload["knots"]),
        degree=payload["degree"],
        spec=spec,
        acceptance_rates=dict(payload["acceptance_rates"]),
        rhat_alpha=float(payload["rhat_alpha"]),
    )
