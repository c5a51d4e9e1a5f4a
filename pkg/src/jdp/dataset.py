"""Canonical data model for longitudinal + time-to-event cohorts.

A cohort couples one survival record per subject (observed time, event
indicator, baseline covariates) with repeated biomarker measurements taken
strictly before the subject's observed time. CSV is the sole interchange
format; subject ids are opaque strings and every deterministic iteration is
ordered lexicographically by id.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .seeds import rng_for


class CohortParseError(ValueError):
    """A CSV cell could not be parsed; carries 1-based row and column."""

    def __init__(self, path, row: int, column: int, message: str):
        self.path = str(path)
        self.row = row
        self.column = column
        super().__init__(f"{path}: row {row}, column {column}: {message}")


class CohortIntegrityError(ValueError):
    """The parsed tables violate a cohort invariant."""


class EmptyResultError(ValueError):
    """An operation produced a cohort with no subjects."""


class StratumError(ValueError):
    """A sampling stratum has too few subjects."""


@dataclass(frozen=True)
class LongitudinalRecord:
    subject_id: str
    time: float
    value: float

    def __post_init__(self):
        if not (self.time >= 0.0):
            raise CohortIntegrityError(
                f"measurement time must be >= 0, got {self.time} for {self.subject_id!r}"
            )
        if not np.isfinite(self.value):
            raise CohortIntegrityError(
                f"measurement value must be finite, got {self.value} for {self.subject_id!r}"
            )


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: str
    observed_time: float
    event: bool
    covariates: tuple[float, ...]

    def __post_init__(self):
        if not (self.observed_time > 0.0):
            raise CohortIntegrityError(
                f"observed_time must be > 0, got {self.observed_time} for {self.subject_id!r}"
            )


@dataclass(frozen=True)
class Cohort:
    """Immutable cohort; safe to share across concurrent tasks.

    `subjects` and `measurements` are stored sorted (by id, and by id/time
    respectively). Use `Cohort.build` to construct from unsorted iterables
    with full invariant checking.
    """

    schema: tuple[str, ...]
    subjects: tuple[SurvivalRecord, ...]
    measurements: tuple[LongitudinalRecord, ...]

    @staticmethod
    def build(schema, subjects, measurements) -> "Cohort":
        schema = tuple(schema)
        subjects = tuple(sorted(subjects, key=lambda s: s.subject_id))
        measurements = tuple(sorted(measurements, key=lambda m: (m.subject_id, m.time)))
        cohort = Cohort(schema, subjects, measurements)
        cohort._validate()
        return cohort

    def _validate(self):
        known: dict[str, SurvivalRecord] = {}
        for rec in self.subjects:
            if rec.subject_id in known:
                raise CohortIntegrityError(f"duplicate subject id {rec.subject_id!r}")
            if len(rec.covariates) != len(self.schema):
                raise CohortIntegrityError(
                    f"subject {rec.subject_id!r} has {len(rec.covariates)} covariates, "
                    f"schema expects {len(self.schema)}"
                )
            known[rec.subject_id] = rec
        seen_measured: set[str] = set()
        prev_key = None
        for m in self.measurements:
            surv = known.get(m.subject_id)
            if surv is None:
                raise CohortIntegrityError(
                    f"measurement references unknown subject {m.subject_id!r}"
                )
            if m.time >= surv.observed_time:
                raise CohortIntegrityError(
                    f"subject {m.subject_id!r}: measurement at time {m.time} is not "
                    f"before observed_time {surv.observed_time}"
                )
            key = (m.subject_id, m.time)
            if key == prev_key:
                raise CohortIntegrityError(
                    f"duplicate measurement time {m.time} for subject {m.subject_id!r}"
                )
            prev_key = key
            seen_measured.add(m.subject_id)
        missing = set(known) - seen_measured
        if missing:
            raise CohortIntegrityError(
                f"subjects without measurements: {sorted(missing)[:5]}"
            )

    @cached_property
    def subject_ids(self) -> tuple[str, ...]:
        return tuple(s.subject_id for s in self.subjects)

    @cached_property
    def by_id(self) -> dict[str, SurvivalRecord]:
        return {s.subject_id: s for s in self.subjects}

    @cached_property
    def measurements_by_id(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Per-subject (times, values) arrays, times ascending."""
        out: dict[str, tuple[list, list]] = {sid: ([], []) for sid in self.subject_ids}
        for m in self.measurements:
            t, v = out[m.subject_id]
            t.append(m.time)
            v.append(m.value)
        return {
            sid: (np.asarray(t, dtype=float), np.asarray(v, dtype=float))
            for sid, (t, v) in out.items()
        }

    @cached_property
    def observed_times(self) -> np.ndarray:
        return np.array([s.observed_time for s in self.subjects], dtype=float)

    @cached_property
    def event_flags(self) -> np.ndarray:
        return np.array([s.event for s in self.subjects], dtype=bool)

    @cached_property
    def covariate_matrix(self) -> np.ndarray:
        """(n_subjects, n_covariates) in subject-id order."""
        return np.array([s.covariates for s in self.subjects], dtype=float).reshape(
            len(self.subjects), len(self.schema)
        )

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def subset(self, ids) -> "Cohort":
        """Sub-cohort restricted to `ids` (full survival + measurement data)."""
        wanted = set(ids)
        missing = wanted - set(self.subject_ids)
        if missing:
            raise KeyError(f"unknown subject ids: {sorted(missing)[:5]}")
        return Cohort.build(
            self.schema,
            [s for s in self.subjects if s.subject_id in wanted],
            [m for m in self.measurements if m.subject_id in wanted],
        )


@dataclass(frozen=True)
class FoldAssignment:
    """Maps every subject id to a fold index in [0, K)."""

    n_folds: int
    folds: dict[str, int] = field(hash=False)

    def test_ids(self, k: int) -> tuple[str, ...]:
        return tuple(sorted(sid for sid, f in self.folds.items() if f == k))

    def train_ids(self, k: int) -> tuple[str, ...]:
        return tuple(sorted(sid for sid, f in self.folds.items() if f != k))


_LONG_HEADER = ["subject_id", "time", "value"]
_SURV_PREFIX = ["subject_id", "observed_time", "event"]


def _parse_float(path, row_idx, col_idx, text):
    try:
        return float(text)
    except ValueError:
        raise CohortParseError(path, row_idx, col_idx, f"not a number: {text!r}") from None


def load_cohort(longitudinal_path, survival_path) -> Cohort:
    """Read the two-file CSV representation and validate all invariants.

    Longitudinal header: ``subject_id,time,value``. Survival header:
    ``subject_id,observed_time,event,<covariate names...>`` with event in
    {0, 1}. Raises `CohortParseError` (with row/column) on malformed cells
    and `CohortIntegrityError` on cross-file inconsistencies.
    """
    longitudinal_path = Path(longitudinal_path)
    survival_path = Path(survival_path)

    measurements = []
    with open(longitudinal_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != _LONG_HEADER:
            raise CohortParseError(
                longitudinal_path, 1, 1, f"expected header {','.join(_LONG_HEADER)!r}"
            )
        for i, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise CohortParseError(
                    longitudinal_path, i, len(row) + 1, f"expected 3 fields, got {len(row)}"
                )
            sid = row[0].strip()
            t = _parse_float(longitudinal_path, i, 2, row[1])
            v = _parse_float(longitudinal_path, i, 3, row[2])
            measurements.append(LongitudinalRecord(sid, t, v))

    subjects = []
    with open(survival_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != _SURV_PREFIX:
            raise CohortParseError(
                survival_path, 1, 1, "expected header starting 'subject_id,observed_time,event'"
            )
        schema = tuple(h.strip() for h in header[3:])
        for i, row in enumerate(reader, start=2):
            if len(row) != 3 + len(schema):
                raise CohortParseError(
                    survival_path, i, len(row) + 1,
                    f"expected {3 + len(schema)} fields, got {len(row)}",
                )
            sid = row[0].strip()
            t_obs = _parse_float(survival_path, i, 2, row[1])
            ev_text = row[2].strip()
            if ev_text not in ("0", "1"):
                raise CohortParseError(survival_path, i, 3, f"event must be 0 or 1, got {ev_text!r}")
            covs = tuple(
                _parse_float(survival_path, i, 4 + j, row[3 + j]) for j in range(len(schema))
            )
            subjects.append(SurvivalRecord(sid, t_obs, ev_text == "1", covs))

    return Cohort.build(schema, subjects, measurements)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def emit_cohort(cohort: Cohort, longitudinal_path, survival_path) -> None:
    """Write the two CSV files; floats keep 17 significant digits so a
    subsequent `load_cohort` round-trips bit-exactly."""
    with open(longitudinal_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_LONG_HEADER)
        for m in cohort.measurements:
            writer.writerow([m.subject_id, _fmt(m.time), _fmt(m.value)])
    with open(survival_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_SURV_PREFIX + list(cohort.schema))
        for s in cohort.subjects:
            writer.writerow(
                [s.subject_id, _fmt(s.observed_time), "1" if s.event else "0"]
                + [_fmt(c) for c in s.covariates]
            )


def truncate_history(cohort: Cohort, t: float) -> Cohort:
    """Landmark view at time t: keep subjects still at risk (observed_time
    > t) and only their measurements taken at or before t. Survival fields
    are untouched, so the result is idempotent under re-truncation."""
    if not (t > 0):
        raise ValueError(f"landmark t must be > 0, got {t}")
    kept = [s for s in cohort.subjects if s.observed_time > t]
    if not kept:
        raise EmptyResultError(f"no subject has observed_time > {t}")
    kept_ids = {s.subject_id for s in kept}
    kept_meas = [
        m for m in cohort.measurements if m.subject_id in kept_ids and m.time <= t
    ]
    return Cohort.build(cohort.schema, kept, kept_meas)


def kfold_split(cohort: Cohort, n_folds: int, seed: int) -> FoldAssignment:
    """Random partition into folds whose sizes differ by at most one,
    deterministic for a given seed."""
    n = cohort.n_subjects
    if n_folds < 2 or n_folds > n:
        raise ValueError(f"n_folds must satisfy 2 <= K <= {n}, got {n_folds}")
    ids = list(cohort.subject_ids)
    perm = rng_for("kfold", seed).permutation(len(ids))
    folds = {ids[j]: int(pos % n_folds) for pos, j in enumerate(perm)}
    return FoldAssignment(n_folds, folds)


def stratified_sample(cohort: Cohort, n: int, event_rate: float, seed: int) -> Cohort:
    """Sample `n` subjects with round(event_rate * n) events (half-to-even
    rounding), drawing without replacement within each event stratum."""
    if not (0.0 <= event_rate <= 1.0):
        raise ValueError(f"event_rate must be in [0, 1], got {event_rate}")
    n_events = int(round(event_rate * n))
    n_censored = n - n_events
    events = [s.subject_id for s in cohort.subjects if s.event]
    censored = [s.subject_id for s in cohort.subjects if not s.event]
    if n_events > len(events):
        raise StratumError(f"requested {n_events} events but cohort has {len(events)}")
    if n_censored > len(censored):
        raise StratumError(
            f"requested {n_censored} censored subjects but cohort has {len(censored)}"
        )
    rng = rng_for("stratified", seed)
    pick_events = [events[i] for i in rng.permutation(len(events))[:n_events]]
    pick_censored = [censored[i] for i in rng.permutation(len(censored))[:n_censored]]
    return cohort.subset(pick_events + pick_censored)
