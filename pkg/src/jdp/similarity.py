"""Feature assembly and cosine-similarity ranking for personalized
subpopulation selection.

Feature vectors concatenate z-scored baseline covariates (training-set
statistics only) with trajectory principal-component scores, which are
left unscaled because they are mean-zero and variance-ordered by
construction. Candidates are ranked by cosine similarity to the index
subject and the top round(M_p * n) form the personalized training set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import Cohort
from .fpca import FpcaModel, scores_for_subject

logger = logging.getLogger(__name__)


class ZeroNormError(ValueError):
    """Cosine similarity is undefined for an all-zero vector."""


@dataclass(frozen=True)
class FeatureVector:
    subject_id: str
    values: tuple[float, ...]


@dataclass(frozen=True)
class Standardization:
    """Per-covariate centering/scaling stats, frozen from the training set.
    Covariates with zero variance are dropped (recorded in `dropped`)."""

    names: tuple[str, ...]
    means: tuple[float, ...]
    sds: tuple[float, ...]
    dropped: tuple[str, ...]


@dataclass(frozen=True)
class FeatureSet:
    columns: tuple[str, ...]
    vectors: tuple[FeatureVector, ...]
    standardization: Standardization

    def matrix(self) -> np.ndarray:
        return np.array([v.values for v in self.vectors], dtype=float)


@dataclass(frozen=True)
class SimilarityRanking:
    index_subject_id: str
    ranked: tuple[tuple[str, float], ...]  # (subject_id, similarity), descending


def fit_standardization(cohort: Cohort) -> Standardization:
    """Training-set means/SDs for each baseline covariate; zero-variance
    covariates are dropped with a warning."""
    mat = cohort.covariate_matrix
    names, means, sds, dropped = [], [], [], []
    for j, name in enumerate(cohort.schema):
        col = mat[:, j]
        sd = float(col.std(ddof=0))
        if sd == 0.0:
            dropped.append(name)
            logger.warning("covariate %r has zero variance; dropped from features", name)
            continue
        names.append(name)
        means.append(float(col.mean()))
        sds.append(sd)
    return Standardization(tuple(names), tuple(means), tuple(sds), tuple(dropped))


def build_features(
    cohort: Cohort,
    fpca_model: FpcaModel,
    standardization: Standardization | None = None,
    n_scores: int | None = None,
    time_cutoff: float | None = None,
) -> FeatureSet:
    """Assemble one feature vector per subject.

    Continuous covariates are z-scored with the supplied (training)
    statistics; pass None to fit the statistics on `cohort` itself.
    Principal-component scores are appended unscaled, computed from each
    subject's own measurements (restricted to `time_cutoff` when given, so
    subjects already past their observed time still get landmark-consistent
    features). `n_scores` caps the score dimension, which aligns feature
    vectors across separately fitted decompositions. Column order:
    covariates in schema order, then pc_1..pc_r. Categorical predictors are
    expected pre-encoded as numeric (one-hot) columns in the cohort schema.
    """
    if standardization is None:
        standardization = fit_standardization(cohort)
    r = fpca_model.n_selected
    if n_scores is not None:
        r = min(r, n_scores)
    columns = tuple(standardization.names) + tuple(f"pc_{k + 1}" for k in range(r))
    vectors = []
    schema_idx = {name: i for i, name in enumerate(cohort.schema)}
    for subj in cohort.subjects:
        vals = []
        for name, mu, sd in zip(
            standardization.names, standardization.means, standardization.sds
        ):
            vals.append((subj.covariates[schema_idx[name]] - mu) / sd)
        if r:
            times, values = cohort.measurements_by_id[subj.subject_id]
            if time_cutoff is not None:
                keep = times <= time_cutoff + 1e-12
                times, values = times[keep], values[keep]
            vals.extend(scores_for_subject(fpca_model, times, values)[:r].tolist())
        vectors.append(FeatureVector(subj.subject_id, tuple(float(v) for v in vals)))
    return FeatureSet(columns, tuple(vectors), standardization)


def cosine(a: FeatureVector, b: FeatureVector) -> float:
    """Cosine of the angle between two feature vectors, clamped to [-1, 1]."""
    va = np.asarray(a.values, dtype=float)
    vb = np.asarray(b.values, dtype=float)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0:
        raise ZeroNormError(f"zero-norm feature vector for {a.subject_id!r}")
    if nb == 0.0:
        raise ZeroNormError(f"zero-norm feature vector for {b.subject_id!r}")
    return float(np.clip(float(va @ vb) / (na * nb), -1.0, 1.0))


def rank_similar(index: FeatureVector, training: FeatureSet) -> SimilarityRanking:
    """Training subjects in descending similarity to the index subject;
    ties break lexicographically by id. Zero-norm training vectors are
    excluded with a warning."""
    sims = []
    for vec in training.vectors:
        try:
            sims.append((vec.subject_id, cosine(index, vec)))
        except ZeroNormError:
            logger.warning(
                "training subject %r has a zero-norm feature vector; excluded",
                vec.subject_id,
            )
    sims.sort(key=lambda pair: (-pair[1], pair[0]))
    return SimilarityRanking(index.subject_id, tuple(sims))


def select_subpopulation(ranking: SimilarityRanking, m_p: float, n: int) -> tuple[str, ...]:
    """Ids of the top m = round(m_p * n) most similar subjects (at least 1;
    half-to-even rounding); nested across increasing m_p by construction."""
    if not (0.0 < m_p <= 1.0):
        raise ValueError(f"m_p must be in (0, 1], got {m_p}")
    m = max(1, round(m_p * n))
    m = min(m, len(ranking.ranked))
    return tuple(sid for sid, _ in ranking.ranked[:m])


def write_feature_csv(features: FeatureSet, path) -> None:
    """Audit dump of the feature matrix; header is the documented column
    order (subject_id, covariates in schema order, then pc_k)."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", *features.columns])
        for vec in features.vectors:
            writer.writerow([vec.subject_id] + [repr(v) for v in vec.values])
