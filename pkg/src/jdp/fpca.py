"""Functional PCA of longitudinal trajectories.

Mean and covariance functions are estimated by local-linear smoothing of
pooled observations (binned to the evaluation grid, Gaussian kernel,
bandwidth chosen by GCV with a 10%-of-span fallback). The smoothed
covariance surface excludes same-time cross-products so measurement noise
stays out of the eigendecomposition; the noise variance is recovered from
the gap between the smoothed diagonal variance and the surface diagonal.
Per-subject component scores use the conditional-expectation (PACE)
formula, so they are well defined for sparse histories and for subjects
outside the fitting set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .dataset import Cohort

logger = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 51


class InsufficientSubjectsError(ValueError):
    pass


class NoMeasurementsError(ValueError):
    pass


@dataclass(frozen=True)
class FpcaModel:
    grid: np.ndarray                  # (G,)
    mean_function: np.ndarray         # (G,)
    eigenfunctions: np.ndarray        # (G, r_max), trapezoid-orthonormal
    eigenvalues: np.ndarray           # (r_max,), non-increasing, >= 0
    explained_variance: np.ndarray    # (r_max,), cumulative fractions
    noise_variance: float
    n_selected: int                   # components meeting the variance threshold
    scores: dict[str, np.ndarray]     # fitting-set subject_id -> (n_selected,)
    degenerate: bool = False

    @property
    def quad_weights(self) -> np.ndarray:
        return _trapz_weights(self.grid)


def _trapz_weights(grid: np.ndarray) -> np.ndarray:
    w = np.zeros_like(grid)
    w[:-1] += np.diff(grid) / 2.0
    w[1:] += np.diff(grid) / 2.0
    return w


def _local_linear_1d(x_support, y_support, w_support, x_eval, bandwidth):
    """Weighted local-linear fit values at `x_eval` (Gaussian kernel)."""
    xs = x_support[None, :] - x_eval[:, None]
    k = np.exp(-0.5 * (xs / bandwidth) ** 2) * w_support[None, :]
    s0 = k.sum(axis=1)
    s1 = (k * xs).sum(axis=1)
    s2 = (k * xs * xs).sum(axis=1)
    t0 = (k * y_support[None, :]).sum(axis=1)
    t1 = (k * xs * y_support[None, :]).sum(axis=1)
    denom = s0 * s2 - s1 * s1
    with np.errstate(divide="ignore", invalid="ignore"):
        est = (s2 * t0 - s1 * t1) / denom
    # Fall back to the locally-constant estimate where the design is singular.
    bad = ~np.isfinite(est)
    if np.any(bad):
        with np.errstate(divide="ignore", invalid="ignore"):
            est[bad] = (t0[bad] / s0[bad])
    return est


def _gcv_1d(x_support, y_support, w_support, bandwidths):
    """Bandwidth minimizing GCV of the binned regression: bin means are the
    observations (weighted by occupancy), the trace is bin-level, so
    between-subject spread inside a bin does not reward oversmoothing."""
    n_bins = len(x_support)
    w_total = float(w_support.sum())
    best_h, best_score = None, np.inf
    for h in bandwidths:
        fitted = _local_linear_1d(x_support, y_support, w_support, x_support, h)
        if not np.all(np.isfinite(fitted)):
            continue
        rss = float(w_support @ (y_support - fitted) ** 2)
        tr = 0.0
        for j in range(n_bins):
            d = x_support - x_support[j]
            k = np.exp(-0.5 * (d / h) ** 2) * w_support
            s0, s1, s2 = k.sum(), (k * d).sum(), (k * d * d).sum()
            denom = s0 * s2 - s1 * s1
            if denom <= 0:
                tr = np.inf
                break
            tr += w_support[j] * s2 / denom
        if not np.isfinite(tr) or tr >= n_bins:
            continue
        score = (rss / w_total) / (1.0 - tr / n_bins) ** 2
        if score < best_score:
            best_h, best_score = h, score
    return best_h


def _local_linear_2d(pts, vals, wts, eval_pts, bandwidth):
    """Local-plane fit of a surface at `eval_pts` (product Gaussian kernel)."""
    out = np.empty(len(eval_pts))
    for i, (ex, ey) in enumerate(eval_pts):
        dx = pts[:, 0] - ex
        dy = pts[:, 1] - ey
        k = np.exp(-0.5 * ((dx / bandwidth) ** 2 + (dy / bandwidth) ** 2)) * wts
        s0 = k.sum()
        sx, sy = (k * dx).sum(), (k * dy).sum()
        sxx, syy, sxy = (k * dx * dx).sum(), (k * dy * dy).sum(), (k * dx * dy).sum()
        t0, tx, ty = (k * vals).sum(), (k * dx * vals).sum(), (k * dy * vals).sum()
        m = np.array([[s0, sx, sy], [sx, sxx, sxy], [sy, sxy, syy]])
        rhs = np.array([t0, tx, ty])
        try:
            sol = np.linalg.solve(m + 1e-12 * np.eye(3) * max(s0, 1e-300), rhs)
            out[i] = sol[0]
        except np.linalg.LinAlgError:
            out[i] = t0 / s0 if s0 > 0 else np.nan
    return out


def fit_fpca(cohort: Cohort, grid=None, variance_threshold: float = 0.95,
             max_components: int = 10) -> FpcaModel:
    """Fit the trajectory decomposition on a cohort's measurements.

    `grid` defaults to 51 equispaced points spanning the observation
    window. Components are retained up to the smallest number whose
    cumulative variance fraction reaches `variance_threshold`.
    """
    if not (0.0 < variance_threshold <= 1.0):
        raise ValueError(f"variance_threshold must be in (0,1], got {variance_threshold}")
    if cohort.n_subjects < 10:
        raise InsufficientSubjectsError(
            f"FPCA needs >= 10 subjects, got {cohort.n_subjects}"
        )
    all_times = np.array([m.time for m in cohort.measurements])
    all_values = np.array([m.value for m in cohort.measurements])
    if grid is None:
        grid = np.linspace(all_times.min(), all_times.max(), DEFAULT_GRID_SIZE)
    grid = np.asarray(grid, dtype=float)
    G = len(grid)
    span = grid[-1] - grid[0]
    if span <= 0:
        raise ValueError("grid must span a positive window")
    if all_times.min() < grid[0] - 1e-9 or all_times.max() > grid[-1] + 1e-9:
        raise ValueError("grid does not cover the observation window")

    # --- mean function: bin pooled observations, smooth ------------------
    bin_idx = np.clip(np.round((all_times - grid[0]) / span * (G - 1)).astype(int), 0, G - 1)
    counts = np.bincount(bin_idx, minlength=G).astype(float)
    sums = np.bincount(bin_idx, weights=all_values, minlength=G)
    occ = counts > 0
    ybar = np.zeros(G)
    ybar[occ] = sums[occ] / counts[occ]

    # The low end sits below the grid step so noiseless dense data can be
    # fitted at near-interpolation accuracy; sparse designs reject tiny
    # bandwidths through the GCV singularity guard.
    candidates = np.geomspace(max(0.35 * span / (G - 1), 1e-3 * span), span / 2.0, 10)
    h_mu = _gcv_1d(grid[occ], ybar[occ], counts[occ], candidates)
    if h_mu is None:
        h_mu = 0.1 * span
    mu = _local_linear_1d(grid[occ], ybar[occ], counts[occ], grid, h_mu)

    # --- covariance surface from off-diagonal raw cross-products ---------
    cov_sum = np.zeros((G, G))
    cov_cnt = np.zeros((G, G))
    diag_sum = np.zeros(G)
    diag_cnt = np.zeros(G)
    for sid in cohort.subject_ids:
        times, values = cohort.measurements_by_id[sid]
        idx = np.clip(np.round((times - grid[0]) / span * (G - 1)).astype(int), 0, G - 1)
        resid = values - mu[idx]
        outer = np.outer(resid, resid)
        # np.add.at: repeated bins (several measurements in one grid cell)
        # must accumulate; buffered fancy-index += would drop them.
        pair_idx = (idx[:, None], idx[None, :])
        np.add.at(cov_sum, pair_idx, outer)
        np.add.at(cov_cnt, pair_idx, 1.0)
        # Same-measurement products carry the noise variance; keep them out.
        np.add.at(cov_sum, (idx, idx), -resid * resid)
        np.add.at(cov_cnt, (idx, idx), -1.0)
        np.add.at(diag_sum, idx, resid * resid)
        np.add.at(diag_cnt, idx, 1.0)

    off = cov_cnt > 0
    if not np.any(off):
        raise InsufficientSubjectsError("no subject has two distinct measurement times")
    pts = np.column_stack([np.repeat(grid, G)[off.ravel()], np.tile(grid, G)[off.ravel()]])
    vals = (cov_sum[off] / cov_cnt[off])
    wts = cov_cnt[off]

    # Identical trajectories leave only float-precision residue in the
    # cross-products (mean-removal rounding, ~eps^2 on the data scale).
    data_scale = max(1.0, float(np.abs(all_values).max()))
    if float(np.abs(vals).max()) <= 1e-24 * data_scale**2:
        logger.warning("degenerate trajectories: total variance is zero")
        return FpcaModel(
            grid=grid, mean_function=mu,
            eigenfunctions=np.zeros((G, 0)), eigenvalues=np.zeros(0),
            explained_variance=np.zeros(0), noise_variance=0.0, n_selected=0,
            scores={sid: np.zeros(0) for sid in cohort.subject_ids},
            degenerate=True,
        )

    h_cov = _gcv_2d(pts, vals, wts, candidates)
    if h_cov is None:
        h_cov = 0.1 * span
    eval_pts = np.column_stack([np.repeat(grid, G), np.tile(grid, G)])
    surface = _local_linear_2d(pts, vals, wts, eval_pts, h_cov).reshape(G, G)
    surface = 0.5 * (surface + surface.T)

    # --- eigendecomposition under trapezoid quadrature weights -----------
    w = _trapz_weights(grid)
    sw = np.sqrt(w)
    sym = sw[:, None] * surface * sw[None, :]
    sym = 0.5 * (sym + sym.T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    clipped = eigvals < 0
    if np.any(eigvals < -1e-8 * max(eigvals.max(), 1.0)):
        logger.warning(
            "smoothed covariance not positive semidefinite; "
            "%d negative eigenvalues truncated at 0", int(clipped.sum()),
        )
    eigvals = np.clip(eigvals, 0.0, None)
    total = eigvals.sum()
    if total <= 0:
        logger.warning("degenerate trajectories: smoothed covariance is zero")
        return FpcaModel(
            grid=grid, mean_function=mu,
            eigenfunctions=np.zeros((G, 0)), eigenvalues=np.zeros(0),
            explained_variance=np.zeros(0), noise_variance=0.0, n_selected=0,
            scores={sid: np.zeros(0) for sid in cohort.subject_ids},
            degenerate=True,
        )
    cumfrac = np.cumsum(eigvals) / total
    n_selected = int(np.searchsorted(cumfrac, variance_threshold - 1e-12) + 1)
    n_selected = min(n_selected, int((eigvals > 0).sum()))
    r_max = min(max(n_selected, min(max_components, G)), int((eigvals > 0).sum()))
    phi = eigvecs[:, :r_max] / sw[:, None]
    # Deterministic sign: positive grid integral, else first nonzero positive.
    for k in range(r_max):
        integral = float(w @ phi[:, k])
        if abs(integral) > 1e-10:
            flip = integral < 0
        else:
            nz = np.nonzero(np.abs(phi[:, k]) > 1e-12)[0]
            flip = bool(len(nz)) and phi[nz[0], k] < 0
        if flip:
            phi[:, k] = -phi[:, k]

    # --- noise variance from the diagonal gap -----------------------------
    docc = diag_cnt > 0
    vdiag = _local_linear_1d(
        grid[docc], diag_sum[docc] / diag_cnt[docc], diag_cnt[docc], grid, h_mu
    )
    lo, hi = int(0.25 * G), max(int(0.75 * G), int(0.25 * G) + 1)
    noise = float(np.mean(vdiag[lo:hi] - np.diag(surface)[lo:hi]))
    noise = max(noise, 0.0)

    model = FpcaModel(
        grid=grid, mean_function=mu,
        eigenfunctions=phi, eigenvalues=eigvals[:r_max],
        explained_variance=cumfrac[:r_max], noise_variance=noise,
        n_selected=n_selected, scores={}, degenerate=False,
    )
    scores = {}
    for sid in cohort.subject_ids:
        times, values = cohort.measurements_by_id[sid]
        scores[sid] = scores_for_subject(model, times, values)
    return replace(model, scores=scores)


def _gcv_2d(pts, vals, wts, bandwidths):
    """Cell-level GCV for the smoothed covariance surface (same rationale
    as `_gcv_1d`: cells are the observations, trace is cell-level)."""
    n_cells = len(pts)
    w_total = float(wts.sum())
    best_h, best_score = None, np.inf
    for h in bandwidths:
        fitted = _local_linear_2d(pts, vals, wts, pts, h)
        if not np.all(np.isfinite(fitted)):
            continue
        rss = float(wts @ (vals - fitted) ** 2)
        tr = 0.0
        for j in range(n_cells):
            dx = pts[:, 0] - pts[j, 0]
            dy = pts[:, 1] - pts[j, 1]
            k = np.exp(-0.5 * ((dx / h) ** 2 + (dy / h) ** 2)) * wts
            s0 = k.sum()
            sx, sy = (k * dx).sum(), (k * dy).sum()
            sxx, syy, sxy = (k * dx * dx).sum(), (k * dy * dy).sum(), (k * dx * dy).sum()
            m = np.array([[s0, sx, sy], [sx, sxx, sxy], [sy, sxy, syy]])
            try:
                sol = np.linalg.solve(m + 1e-12 * np.eye(3) * max(s0, 1e-300),
                                      np.array([1.0, 0.0, 0.0]))
            except np.linalg.LinAlgError:
                tr = np.inf
                break
            tr += wts[j] * sol[0]
        if not np.isfinite(tr) or tr >= n_cells:
            continue
        score = (rss / w_total) / (1.0 - tr / n_cells) ** 2
        if score < best_score:
            best_h, best_score = h, score
    return best_h


def scores_for_subject(model: FpcaModel, times, values) -> np.ndarray:
    """Conditional-expectation component scores from one subject's
    measurements; usable for subjects outside the fitting set."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    in_span = (times >= model.grid[0] - 1e-9) & (times <= model.grid[-1] + 1e-9)
    if not np.any(in_span):
        raise NoMeasurementsError("subject has no measurement within the model grid")
    times, values = times[in_span], values[in_span]
    r = model.n_selected
    if r == 0 or model.degenerate:
        return np.zeros(r)
    mu_i = np.interp(times, model.grid, model.mean_function)
    phi_i = np.column_stack([
        np.interp(times, model.grid, model.eigenfunctions[:, k]) for k in range(r)
    ])
    lam = model.eigenvalues[:r]
    cov_y = phi_i @ np.diag(lam) @ phi_i.T + model.noise_variance * np.eye(len(times))
    resid = values - mu_i
    if model.noise_variance > 0:
        sol = np.linalg.solve(cov_y, resid)
    else:
        sol = np.linalg.pinv(cov_y, rcond=1e-12) @ resid
    return lam * (phi_i.T @ sol)


def basis_alignment(model_a: FpcaModel, model_b: FpcaModel) -> np.ndarray:
    """Diagnostic: trapezoid inner products between the eigenfunctions of
    two fits (model_b interpolated onto model_a's grid). Values near +-1 on
    the diagonal indicate aligned bases."""
    w = model_a.quad_weights
    r_a = model_a.eigenfunctions.shape[1]
    r_b = model_b.eigenfunctions.shape[1]
    out = np.zeros((r_a, r_b))
    for j in range(r_a):
        for k in range(r_b):
            phi_b = np.interp(model_a.grid, model_b.grid, model_b.eigenfunctions[:, k])
            out[j, k] = float(np.sum(w * model_a.eigenfunctions[:, j] * phi_b))
    return out
