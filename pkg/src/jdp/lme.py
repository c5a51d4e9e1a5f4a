"""Random-intercept-and-slope linear mixed-effects model.

The marginal likelihood is profiled over the fixed effects and the
residual variance, leaving a 3-parameter optimization over the Cholesky
factor of the relative random-effects covariance (D / sigma^2), which
keeps every iterate positive semidefinite. Per-subject contributions are
reduced to sufficient statistics so each objective evaluation is a fixed
number of vectorized 2x2 operations regardless of measurement counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .dataset import Cohort

_LOG_2PI = float(np.log(2.0 * np.pi))


class NonIdentifiableError(ValueError):
    """Design too thin to identify the slope random effect."""


class LmeConvergenceError(RuntimeError):
    def __init__(self, message: str, last_iterate: np.ndarray, loglik: float):
        self.last_iterate = last_iterate
        self.loglik = loglik
        super().__init__(f"{message} (last loglik {loglik:.6f})")


@dataclass(frozen=True)
class LmeFit:
    beta_hat: tuple[float, float]          # (intercept, slope on time)
    d_hat: np.ndarray                      # 2x2 random-effects covariance
    sigma_hat: float                       # residual SD
    b_hat: dict[str, tuple[float, float]]  # per-subject posterior means
    loglik: float
    loglik_path: tuple[float, ...] = ()    # best loglik per optimizer iteration


@dataclass(frozen=True)
class _SuffStats:
    ids: tuple[str, ...]
    n: np.ndarray     # measurements per subject
    st: np.ndarray    # sum t
    stt: np.ndarray   # sum t^2
    sy: np.ndarray    # sum y
    sty: np.ndarray   # sum t*y
    syy: np.ndarray   # sum y^2

    @property
    def zz(self) -> np.ndarray:
        """(n_subj, 2, 2) per-subject Z'Z."""
        return np.stack(
            [np.stack([self.n, self.st], -1), np.stack([self.st, self.stt], -1)], -2
        )

    @property
    def zy(self) -> np.ndarray:
        """(n_subj, 2) per-subject Z'y."""
        return np.stack([self.sy, self.sty], -1)


def _suff_stats(cohort: Cohort) -> _SuffStats:
    ids = cohort.subject_ids
    cols = {k: np.zeros(len(ids)) for k in ("n", "st", "stt", "sy", "sty", "syy")}
    for i, sid in enumerate(ids):
        t, y = cohort.measurements_by_id[sid]
        cols["n"][i] = len(t)
        cols["st"][i] = t.sum()
        cols["stt"][i] = (t * t).sum()
        cols["sy"][i] = y.sum()
        cols["sty"][i] = (t * y).sum()
        cols["syy"][i] = (y * y).sum()
    return _SuffStats(ids, **cols)


def _profiled_pieces(theta: np.ndarray, ss: _SuffStats):
    """Profiled beta-hat, sigma2-hat, sum log det M, and per-subject M^-1.

    theta = (l11, l21, l22) parameterizes Lam, the lower Cholesky factor of
    D / sigma^2; M_i = I + Lam' Z_i'Z_i Lam.
    """
    lam = np.array([[theta[0], 0.0], [theta[1], theta[2]]])
    zz, zy = ss.zz, ss.zy
    azl = zz @ lam                                   # (n,2,2) A Lam
    m = np.swapaxes(azl, -1, -2) @ lam               # Lam' A Lam
    m[:, 0, 0] += 1.0
    m[:, 1, 1] += 1.0
    det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
    minv = np.empty_like(m)
    minv[:, 0, 0] = m[:, 1, 1]
    minv[:, 1, 1] = m[:, 0, 0]
    minv[:, 0, 1] = -m[:, 0, 1]
    minv[:, 1, 0] = -m[:, 1, 0]
    minv /= det[:, None, None]

    lzy = zy @ lam                                   # (n,2) Lam' Z'y
    core = azl @ minv                                # A Lam M^-1
    xwx = zz - core @ np.swapaxes(azl, -1, -2)       # per-subject X'W^-1 X
    xwy = zy - np.einsum("nij,nj->ni", core, lzy)
    ywy = ss.syy - np.einsum("ni,nij,nj->n", lzy, minv, lzy)

    sxwx = xwx.sum(axis=0)
    sxwy = xwy.sum(axis=0)
    beta = np.linalg.solve(sxwx, sxwy)
    n_total = ss.n.sum()
    quad = ywy.sum() - 2.0 * beta @ sxwy + beta @ sxwx @ beta
    sigma2 = max(float(quad / n_total), 1e-300)
    return lam, beta, sigma2, float(np.log(det).sum()), minv


def _deviance(theta: np.ndarray, ss: _SuffStats) -> float:
    _, _, sigma2, logdet, _ = _profiled_pieces(theta, ss)
    n_total = ss.n.sum()
    return n_total * (_LOG_2PI + np.log(sigma2)) + logdet + n_total


def fit_lme(cohort: Cohort, max_iter: int = 500) -> LmeFit:
    """Maximum-likelihood fit with empirical-Bayes subject effects.

    Convergence requires successive best log-likelihoods to agree within
    1e-8; failure within `max_iter` simplex iterations raises
    `LmeConvergenceError` carrying the last iterate.
    """
    if cohort.n_subjects < 2:
        raise NonIdentifiableError("need at least 2 subjects")
    ss = _suff_stats(cohort)
    if int((ss.n >= 2).sum()) < 2:
        raise NonIdentifiableError(
            "slope random effect is not identifiable: fewer than 2 subjects "
            "have 2+ measurements"
        )

    # Moment-based start: pooled OLS residual scale relative to noise.
    x0 = np.array([0.5, 0.0, 0.1])
    path: list[float] = []

    def track(xk):
        path.append(-0.5 * _deviance(xk, ss))

    res = minimize(
        _deviance, x0, args=(ss,), method="Nelder-Mead", callback=track,
        options={"maxiter": max_iter, "maxfev": 4 * max_iter,
                 "fatol": 2e-8, "xatol": 1e-10},
    )
    if not res.success:
        raise LmeConvergenceError(
            f"optimizer did not converge within {max_iter} iterations",
            res.x, -0.5 * float(res.fun),
        )
    lam, beta, sigma2, _, minv = _profiled_pieces(res.x, ss)
    d_hat = sigma2 * (lam @ lam.T)
    resid_zy = ss.zy - ss.zz @ beta                  # per-subject Z'(y - X beta)
    b = np.einsum("ij,njk,lk,nl->ni", lam, minv, lam, resid_zy)
    b_hat = {sid: (float(b[i, 0]), float(b[i, 1])) for i, sid in enumerate(ss.ids)}
    return LmeFit(
        beta_hat=(float(beta[0]), float(beta[1])),
        d_hat=d_hat,
        sigma_hat=float(np.sqrt(sigma2)),
        b_hat=b_hat,
        loglik=-0.5 * float(res.fun),
        loglik_path=tuple(path),
    )


def predict_trajectory(fit: LmeFit, subject_id: str, t: float) -> float:
    """Subject-specific mean trajectory value at time t."""
    if subject_id not in fit.b_hat:
        raise KeyError(f"unknown subject {subject_id!r}")
    b0, b1 = fit.b_hat[subject_id]
    return (fit.beta_hat[0] + b0) + (fit.beta_hat[1] + b1) * t
