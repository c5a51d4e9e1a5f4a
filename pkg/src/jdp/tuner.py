"""Subpopulation-proportion tuning by repeated K-fold cross-validation.

For every repeat and fold, trajectory decompositions are fitted separately
on the training and testing folds using history up to the landmark; each
at-risk test subject is ranked against the full training fold by cosine
similarity, a personalized joint model is fitted on the top round(M_p * n)
most similar subjects, and the censoring-corrected Brier score aggregates
the per-subject losses. The proportion with the smallest mean Brier score
across the K*W fold values wins.

Every personalized fit is an independent unit of work seeded by a stable
hash of (master seed, repeat, fold, subject, proportion), so results are
identical for any worker count and any execution order.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import scoring
from .dataset import Cohort, kfold_split, truncate_history
from .dynpred import PredictionRequest, predict_survival
from .fpca import FpcaModel, fit_fpca, scores_for_subject
from .jointfit import JointFitInfeasibleError, JointModelSpec, McmcConfig, fit_joint
from .scoring import BrierEstimate, confidence_interval, cv_standard_error, subject_loss
from .seeds import stable_seed
from .similarity import (
    FeatureSet,
    FeatureVector,
    build_features,
    fit_standardization,
    rank_similar,
    select_subpopulation,
)

logger = logging.getLogger(__name__)

DEFAULT_MP_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class TuningConfig:
    mp_grid: tuple[float, ...] = DEFAULT_MP_GRID
    n_folds: int = 5
    n_repeats: int = 10
    t: float = 1.0
    u: float = 4.0
    variance_threshold: float = 0.95
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    n_mc: int = 400
    master_seed: int = 0
    workers: int = 1
    ci_level: float = 0.95
    unreliable_skip_rate: float = 0.05

    def __post_init__(self):
        grid = tuple(float(m) for m in self.mp_grid)
        if len(set(grid)) != len(grid) or any(
            b <= a for a, b in zip(grid, grid[1:])
        ):
            raise ValueError("mp_grid values must be distinct and sorted ascending")
        if any(not (0.0 < m <= 1.0) for m in grid):
            raise ValueError("mp_grid values must lie in (0, 1]")
        if not (self.u > self.t > 0):
            raise ValueError("need u > t > 0")
        if self.n_folds < 2 or self.n_repeats < 1 or self.workers < 1:
            raise ValueError("invalid n_folds / n_repeats / workers")
        object.__setattr__(self, "mp_grid", grid)


@dataclass(frozen=True)
class FoldRow:
    mp: float
    repeat: int
    fold: int
    brier: float | None     # None when the fold is infeasible at this mp
    at_risk: int            # contributing subjects (after skip decrements)
    skipped: int


@dataclass(frozen=True)
class GridEntry:
    mp: float
    feasible: bool
    mean: float | None
    se: float | None
    ci: tuple[float, float] | None
    fold_values: tuple[float, ...]
    infeasible_folds: int
    skip_rate: float
    unreliable: bool


@dataclass(frozen=True)
class TuningReport:
    entries: tuple[GridEntry, ...]
    rows: tuple[FoldRow, ...]
    selected_mp: float | None
    t: float
    u: float
    n_folds: int
    n_repeats: int
    master_seed: int


class AllInfeasibleError(RuntimeError):
    """Every grid value failed on every fold."""


# --------------------------------------------------------------------------
# per-fold context and unit execution
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _TestSubject:
    subject_id: str
    covariates: tuple[float, ...]
    observed_time: float
    event: bool
    hist_t: tuple[tuple[float, ...], tuple[float, ...]]     # history up to t
    hist_full: tuple[tuple[float, ...], tuple[float, ...]]  # full history


@dataclass(frozen=True)
class _FoldContext:
    repeat: int
    fold: int
    train: Cohort
    train_features: FeatureSet
    test_vectors: dict[str, FeatureVector]
    test_subjects: tuple[_TestSubject, ...]   # at-risk, id-sorted
    t: float
    u: float
    mcmc: McmcConfig
    n_mc: int
    master_seed: int
    covariate_names: tuple[str, ...]


def _mp_key(mp: float) -> str:
    return format(float(mp), ".17g")


def prepare_fold(train: Cohort, test: Cohort, config: TuningConfig,
                 repeat: int = 0, fold: int = 0) -> _FoldContext:
    """Fit the per-fold feature machinery (landmark-truncated trajectory
    decompositions on train and test separately, training standardization)
    and collect the at-risk test subjects."""
    t = config.t
    train_trunc = truncate_history(train, t)
    test_trunc = truncate_history(test, t)
    grid = np.linspace(0.0, t, 51)
    fpca_train = fit_fpca(train_trunc, grid=grid,
                          variance_threshold=config.variance_threshold)
    fpca_test = fit_fpca(test_trunc, grid=grid,
                         variance_threshold=config.variance_threshold)
    r_common = min(fpca_train.n_selected, fpca_test.n_selected)
    standardization = fit_standardization(train)
    train_features = build_features(
        train, fpca_train, standardization, n_scores=r_common, time_cutoff=t
    )
    test_features = build_features(
        test_trunc, fpca_test, standardization, n_scores=r_common, time_cutoff=t
    )
    test_vectors = {v.subject_id: v for v in test_features.vectors}

    subjects = []
    for rec in test_trunc.subjects:
        times_t, values_t = test_trunc.measurements_by_id[rec.subject_id]
        times_f, values_f = test.measurements_by_id[rec.subject_id]
        subjects.append(_TestSubject(
            subject_id=rec.subject_id,
            covariates=rec.covariates,
            observed_time=rec.observed_time,
            event=rec.event,
            hist_t=(tuple(times_t), tuple(values_t)),
            hist_full=(tuple(times_f), tuple(values_f)),
        ))
    return _FoldContext(
        repeat=repeat, fold=fold, train=train, train_features=train_features,
        test_vectors=test_vectors, test_subjects=tuple(subjects),
        t=t, u=config.u, mcmc=config.mcmc, n_mc=config.n_mc,
        master_seed=config.master_seed, covariate_names=train.schema,
    )


def _run_unit(ctx: _FoldContext, subject: _TestSubject, mp: float):
    """One personalized fit + its horizon queries. Returns (subject_id,
    (pi_u_t, pi_u_Tj or None)) or (subject_id, None) when infeasible."""
    sid = subject.subject_id
    ranking = rank_similar(ctx.test_vectors[sid], ctx.train_features)
    ids = select_subpopulation(ranking, mp, ctx.train.n_subjects)
    sub = ctx.train.subset(ids)
    fit_seed = stable_seed(ctx.master_seed, ctx.repeat, ctx.fold, sid, _mp_key(mp), "fit")
    spec = JointModelSpec(mcmc=replace(ctx.mcmc, seed=fit_seed))
    try:
        # Short per-subject chains routinely trip the convergence warning;
        # surfacing thousands of them drowns the log, so keep them quiet
        # here and let the Brier aggregation judge the predictions.
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = fit_joint(sub, spec)
    except JointFitInfeasibleError as exc:
        logger.warning("personalized fit infeasible for %s at mp=%s: %s", sid, mp, exc)
        return sid, None
    times_t, values_t = subject.hist_t
    pred_seed = stable_seed(ctx.master_seed, ctx.repeat, ctx.fold, sid, _mp_key(mp), "pred")
    req = PredictionRequest(
        history_times=times_t, history_values=values_t,
        covariates=subject.covariates, t=ctx.t, u=ctx.u,
        n_mc=ctx.n_mc, seed=pred_seed,
    )
    pi_u_t = predict_survival(fit, req).pi_hat
    pi_u_tj = None
    if not subject.event and subject.observed_time < ctx.u:
        times_f, values_f = subject.hist_full
        seed2 = stable_seed(ctx.master_seed, ctx.repeat, ctx.fold, sid, _mp_key(mp), "pred-cens")
        req2 = PredictionRequest(
            history_times=times_f, history_values=values_f,
            covariates=subject.covariates, t=subject.observed_time, u=ctx.u,
            n_mc=ctx.n_mc, seed=seed2,
        )
        pi_u_tj = predict_survival(fit, req2).pi_hat
    return sid, (pi_u_t, pi_u_tj)


def _run_units_chunk(ctx: _FoldContext, mp: float, sids: tuple[str, ...]):
    by_id = {s.subject_id: s for s in ctx.test_subjects}
    return [(sid, mp, _run_unit(ctx, by_id[sid], mp)[1]) for sid in sids]


def personalized_predict(
    train: Cohort,
    subject_id: str,
    history: tuple,
    covariates: tuple[float, ...],
    mp: float,
    t: float,
    u: float,
    fpca_train: FpcaModel,
    fpca_index: FpcaModel,
    config: TuningConfig,
) -> float:
    """Similarity-selected dynamic prediction for one index subject.

    `history` is (times, values) with times <= t; the index subject's
    component scores come from `fpca_index` while training subjects use
    `fpca_train`, mirroring the separate per-fold decompositions.
    """
    times, values = history
    if any(s > t + 1e-9 for s in times):
        raise ValueError("history extends past the landmark t")
    r_common = min(fpca_train.n_selected, fpca_index.n_selected)
    standardization = fit_standardization(train)
    train_features = build_features(train, fpca_train, standardization,
                                    n_scores=r_common, time_cutoff=t)
    vals = []
    schema_idx = {name: i for i, name in enumerate(train.schema)}
    for name, mu, sd in zip(standardization.names, standardization.means,
                            standardization.sds):
        vals.append((covariates[schema_idx[name]] - mu) / sd)
    if r_common:
        vals.extend(scores_for_subject(fpca_index, times, values)[:r_common].tolist())
    index_vec = FeatureVector(subject_id, tuple(float(v) for v in vals))

    ranking = rank_similar(index_vec, train_features)
    ids = select_subpopulation(ranking, mp, train.n_subjects)
    fit_seed = stable_seed(config.master_seed, 0, 0, subject_id, _mp_key(mp), "fit")
    fit = fit_joint(train.subset(ids), JointModelSpec(mcmc=replace(config.mcmc, seed=fit_seed)))
    req = PredictionRequest(
        history_times=tuple(times), history_values=tuple(values),
        covariates=tuple(covariates), t=t, u=u, n_mc=config.n_mc,
        seed=stable_seed(config.master_seed, 0, 0, subject_id, _mp_key(mp), "pred"),
    )
    return predict_survival(fit, req).pi_hat


def _fold_row(ctx: _FoldContext, mp: float, results: dict[str, tuple | None]) -> FoldRow:
    losses = []
    skipped = 0
    for subject in ctx.test_subjects:
        res = results[subject.subject_id]
        if res is None:
            skipped += 1
            continue
        pi_u_t, pi_u_tj = res
        losses.append(subject_loss(
            subject.subject_id, subject.observed_time, subject.event,
            pi_u_t, pi_u_tj, ctx.t, ctx.u,
        ))
    if not losses:
        return FoldRow(mp, ctx.repeat, ctx.fold, None, 0, skipped)
    est = scoring.brier(losses, len(losses), ctx.t, ctx.u)
    return FoldRow(mp, ctx.repeat, ctx.fold, est.value, est.at_risk_count, skipped)


def evaluate_fold(train: Cohort, test: Cohort, mp: float, t: float, u: float,
                  config: TuningConfig) -> BrierEstimate:
    """Censoring-corrected Brier score of personalized predictions for one
    train/test split at a single proportion."""
    overlap = set(train.subject_ids) & set(test.subject_ids)
    if overlap:
        raise ValueError(f"train and test folds overlap: {sorted(overlap)[:5]}")
    cfg = replace(config, t=t, u=u)
    ctx = prepare_fold(train, test, cfg)
    if not ctx.test_subjects:
        raise ValueError(f"no test subject is at risk at t={t}")
    results = {}
    for subject in ctx.test_subjects:
        sid, res = _run_unit(ctx, subject, mp)
        results[sid] = res
    row = _fold_row(ctx, mp, results)
    if row.brier is None:
        raise AllInfeasibleError(f"every personalized fit failed at mp={mp}")
    return BrierEstimate(row.brier, row.at_risk, t, u)


# --------------------------------------------------------------------------
# the full tuning loop
# --------------------------------------------------------------------------

def _chunks(seq, n_chunks):
    k, m = divmod(len(seq), n_chunks)
    out = []
    start = 0
    for i in range(n_chunks):
        size = k + (1 if i < m else 0)
        if size:
            out.append(tuple(seq[start:start + size]))
        start += size
    return out


def tune(cohort: Cohort, config: TuningConfig) -> TuningReport:
    """Grid-search the subpopulation proportion by repeated K-fold CV.

    Deterministic for a fixed config (including master_seed) regardless of
    `config.workers`; all randomness flows through per-unit stable seeds.
    """
    rows: list[FoldRow] = []
    pool = None
    try:
        if config.workers > 1:
            pool = ProcessPoolExecutor(max_workers=config.workers)
        for w in range(config.n_repeats):
            assignment = kfold_split(
                cohort, config.n_folds, stable_seed(config.master_seed, "split", w)
            )
            for k in range(config.n_folds):
                train = cohort.subset(assignment.train_ids(k))
                test = cohort.subset(assignment.test_ids(k))
                ctx = prepare_fold(train, test, config, repeat=w, fold=k)
                if not ctx.test_subjects:
                    raise ValueError(
                        f"no test subject at risk at t={config.t} (repeat {w}, fold {k})"
                    )
                sids = [s.subject_id for s in ctx.test_subjects]
                results: dict[tuple[str, float], tuple | None] = {}
                if pool is None:
                    for mp in config.mp_grid:
                        for subject in ctx.test_subjects:
                            sid, res = _run_unit(ctx, subject, mp)
                            results[(sid, mp)] = res
                else:
                    futures = []
                    for mp in config.mp_grid:
                        for chunk in _chunks(sids, config.workers * 4):
                            futures.append(pool.submit(_run_units_chunk, ctx, mp, chunk))
                    for fut in futures:
                        for sid, mp, res in fut.result():
                            results[(sid, mp)] = res
                for mp in config.mp_grid:
                    per_subject = {sid: results[(sid, mp)] for sid in sids}
                    rows.append(_fold_row(ctx, mp, per_subject))
    finally:
        if pool is not None:
            pool.shutdown()
    return summarize(rows, config)


def summarize(rows, config: TuningConfig) -> TuningReport:
    """Aggregate fold rows into per-proportion summaries and pick the
    proportion with the smallest mean Brier score."""
    entries = []
    for mp in config.mp_grid:
        mine = [r for r in rows if r.mp == mp]
        values = [r.brier for r in mine if r.brier is not None]
        considered = sum(r.at_risk + r.skipped for r in mine)
        skipped = sum(r.skipped for r in mine)
        skip_rate = skipped / considered if considered else 1.0
        infeasible_folds = sum(1 for r in mine if r.brier is None)
        if not values:
            entries.append(GridEntry(mp, False, None, None, None, (), infeasible_folds,
                                     skip_rate, True))
            continue
        if len(values) >= 2:
            mean, se = cv_standard_error(values)
            ci = confidence_interval(mean, se, config.ci_level)
        else:
            mean, se, ci = values[0], None, None
        entries.append(GridEntry(
            mp=mp, feasible=True, mean=mean, se=se, ci=ci,
            fold_values=tuple(values), infeasible_folds=infeasible_folds,
            skip_rate=skip_rate, unreliable=skip_rate > config.unreliable_skip_rate,
        ))
    feasible = [e for e in entries if e.feasible]
    if not feasible:
        selected = None
    else:
        selected = min(feasible, key=lambda e: (e.mean, e.mp)).mp
    return TuningReport(
        entries=tuple(entries), rows=tuple(rows), selected_mp=selected,
        t=config.t, u=config.u, n_folds=config.n_folds,
        n_repeats=config.n_repeats, master_seed=config.master_seed,
    )


def validate(holdout: Cohort, selected_mp: float, config: TuningConfig) -> BrierEstimate:
    """Repeated K-fold evaluation of the holdout at a fixed proportion;
    returns the mean Brier score over the K*W fold values."""
    report = validate_report(holdout, selected_mp, config)
    entry = report.entries[0]
    if not entry.feasible:
        raise AllInfeasibleError(f"every fold infeasible at mp={selected_mp}")
    at_risk = sum(r.at_risk for r in report.rows)
    return BrierEstimate(entry.mean, at_risk, config.t, config.u)


def validate_report(holdout: Cohort, selected_mp: float, config: TuningConfig) -> TuningReport:
    if holdout.n_subjects == 0:
        raise ValueError("holdout cohort is empty")
    cfg = replace(config, mp_grid=(float(selected_mp),))
    return tune(holdout, cfg)


# --------------------------------------------------------------------------
# report serialization
# --------------------------------------------------------------------------

def report_to_dict(report: TuningReport) -> dict:
    return {
        "t": report.t,
        "u": report.u,
        "n_folds": report.n_folds,
        "n_repeats": report.n_repeats,
        "master_seed": report.master_seed,
        "selected_mp": report.selected_mp,
        "entries": [
            {
                "mp": e.mp, "feasible": e.feasible, "mean": e.mean, "se": e.se,
                "ci_low": None if e.ci is None else e.ci[0],
                "ci_high": None if e.ci is None else e.ci[1],
                "fold_values": list(e.fold_values),
                "infeasible_folds": e.infeasible_folds,
                "skip_rate": e.skip_rate, "unreliable": e.unreliable,
            }
            for e in report.entries
        ],
        "rows": [
            {"mp": r.mp, "repeat": r.repeat, "fold": r.fold, "brier": r.brier,
             "at_risk": r.at_risk, "skipped": r.skipped}
            for r in report.rows
        ],
    }


def write_report_csv(report: TuningReport, path) -> None:
    """Flat per-fold rows: mp,repeat,fold,brier,at_risk,skipped."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mp", "repeat", "fold", "brier", "at_risk", "skipped"])
        for r in report.rows:
            writer.writerow([
                repr(r.mp), r.repeat, r.fold,
                "" if r.brier is None else repr(r.brier),
                r.at_risk, r.skipped,
            ])


def write_report_json(report: TuningReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=2)
