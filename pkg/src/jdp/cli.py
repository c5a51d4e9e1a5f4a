"""Command-line front-end: simulate, tune, predict, validate, score.

Outputs land under a required --out directory; every command writes a
manifest.json recording the command, a digest of its effective config, the
master seed, toolkit version, timestamps, and the produced files. Files are
written to a temporary name and renamed into place, so a nonzero exit never
leaves partial outputs. The JDP_SEED environment variable overrides config
seeds for quick reproducibility sweeps.

Exit codes: 0 success; 1 input/config error; 2 generation error;
3 every grid value infeasible; 4 subject not at risk at the landmark.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, dataset, simgen, tuner
from .dynpred import PredictionRequest, predict_survival
from .fpca import fit_fpca, scores_for_subject
from .jointfit import JointModelSpec, McmcConfig, fit_joint, load_fit, save_fit
from .similarity import (
    FeatureVector,
    build_features,
    fit_standardization,
    rank_similar,
    select_subpopulation,
)
from .tuner import AllInfeasibleError, TuningConfig

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_GENERATION = 2
EXIT_INFEASIBLE = 3
EXIT_NOT_AT_RISK = 4


class InputError(Exception):
    pass


class NotAtRiskError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_digest: str
    master_seed: int | None
    version: str
    started: str
    finished: str
    outputs: list[str]


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def _digest(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()


def _tmp_name(path: Path) -> Path:
    # keep the real suffix so format-sniffing writers (matplotlib) still work
    return path.with_name(path.stem + ".tmp" + path.suffix)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = _tmp_name(path)
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _atomic(path: Path, writer) -> None:
    """Run `writer(tmp_path)` then rename the result into place."""
    tmp = _tmp_name(path)
    writer(tmp)
    os.replace(tmp, path)


def _write_manifest(out_dir: Path, command: str, config_obj, master_seed, outputs):
    manifest = RunManifest(
        command=command,
        config_digest=_digest(config_obj),
        master_seed=master_seed,
        version=__version__,
        started=_STARTED,
        finished=_now(),
        outputs=[str(p) for p in outputs],
    )
    _atomic_write_text(out_dir / "manifest.json", json.dumps(asdict(manifest), indent=2))


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(
            f"malformed JSON in {path}: line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None


def _env_seed() -> int | None:
    raw = os.environ.get("JDP_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"JDP_SEED must be an integer, got {raw!r}") from None


def _load_cohort_dir(cohort_dir) -> dataset.Cohort:
    d = Path(cohort_dir)
    longitudinal = d / "longitudinal.csv"
    survival = d / "survival.csv"
    for p in (longitudinal, survival):
        if not p.exists():
            raise InputError(f"missing cohort file: {p}")
    try:
        return dataset.load_cohort(longitudinal, survival)
    except (dataset.CohortParseError, dataset.CohortIntegrityError) as exc:
        raise InputError(str(exc)) from None


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def _event_keys(raw: dict) -> dict:
    # the Weibull scale is written "lambda" in config files; the dataclass
    # field avoids the keyword
    out = dict(raw)
    if "lambda" in out:
        out["lam"] = out.pop("lambda")
    return out


def _scenario_from_config(cfg: dict) -> tuple[simgen.ScenarioConfig, int, str]:
    seed = _env_seed()
    if seed is None:
        seed = int(cfg.get("seed", 0))
    mode = cfg.get("generator_mode", "closed_form")
    preset = cfg.get("preset")
    try:
        if preset is not None:
            if preset not in simgen.SCENARIO_PRESETS:
                raise InputError(
                    f"unknown preset {preset!r}; choose from "
                    f"{sorted(simgen.SCENARIO_PRESETS)}"
                )
            config = simgen.SCENARIO_PRESETS[preset](int(cfg.get("n", 2000)))
            if "longitudinal" in cfg:
                config = replace(
                    config,
                    longitudinal=replace(config.longitudinal, **cfg["longitudinal"]),
                )
            if "event" in cfg:
                config = replace(config, event=replace(config.event, **_event_keys(cfg["event"])))
        else:
            for key in ("longitudinal", "event", "n"):
                if key not in cfg:
                    raise InputError(f"scenario config missing {key!r} (or use 'preset')")
            lg = cfg["longitudinal"]
            if "time_grid" in lg:
                lg = dict(lg, time_grid=tuple(lg["time_grid"]))
            config = simgen.ScenarioConfig(
                longitudinal=simgen.LongitudinalParams(**lg),
                event=simgen.EventParams(**_event_keys(cfg["event"])),
                n=int(cfg["n"]),
                t_landmark=float(cfg.get("t_landmark", 1.0)),
                u_horizon=float(cfg.get("u_horizon", 4.0)),
            )
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid scenario config: {exc}") from None
    if mode not in ("closed_form", "numeric"):
        raise InputError(f"generator_mode must be closed_form or numeric, got {mode!r}")
    return config, seed, mode


def cmd_simulate(args) -> int:
    cfg = _load_json(args.config)
    config, seed, mode = _scenario_from_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cohort = simgen.generate_scenario(config, seed=seed, generator_mode=mode)
    except (simgen.BracketError, simgen.QuadratureError, simgen.EventTimeDomainError) as exc:
        print(f"generation error: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    long_path = out / "longitudinal.csv"
    surv_path = out / "survival.csv"
    tmp_long = out / "longitudinal.csv.tmp"
    tmp_surv = out / "survival.csv.tmp"
    dataset.emit_cohort(cohort, tmp_long, tmp_surv)
    os.replace(tmp_long, long_path)
    os.replace(tmp_surv, surv_path)
    _write_manifest(out, "simulate", {**cfg, "seed": seed, "generator_mode": mode},
                    seed, [long_path, surv_path])
    print(f"wrote {cohort.n_subjects} subjects -> {long_path}, {surv_path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# tune / validate
# --------------------------------------------------------------------------

def _tuning_config(cfg: dict, workers: int) -> TuningConfig:
    seed = _env_seed()
    if seed is None:
        seed = int(cfg.get("master_seed", 0))
    mcmc_cfg = cfg.get("mcmc", {})
    try:
        mcmc = McmcConfig(**{**mcmc_cfg, "seed": int(mcmc_cfg.get("seed", 0))})
        return TuningConfig(
            mp_grid=tuple(cfg.get("mp_grid", tuner.DEFAULT_MP_GRID)),
            n_folds=int(cfg.get("n_folds", 5)),
            n_repeats=int(cfg.get("n_repeats", 10)),
            t=float(cfg.get("t", 1.0)),
            u=float(cfg.get("u", 4.0)),
            variance_threshold=float(cfg.get("variance_threshold", 0.95)),
            mcmc=mcmc,
            n_mc=int(cfg.get("n_mc", 400)),
            master_seed=seed,
            workers=workers,
        )
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid tuning config: {exc}") from None


def _emit_report(report, out: Path, stem: str):
    from . import plots

    json_path = out / f"{stem}.json"
    csv_path = out / f"{stem}.csv"
    png_path = out / f"{stem}.png"
    spread_path = out / f"{stem}_folds.png"
    _atomic(json_path, lambda tmp: tuner.write_report_json(report, tmp))
    _atomic(csv_path, lambda tmp: tuner.write_report_csv(report, tmp))
    _atomic(png_path, lambda tmp: plots.plot_tuning_report(report, tmp))
    _atomic(spread_path, lambda tmp: plots.plot_fold_spread(report, tmp))
    return [json_path, csv_path, png_path, spread_path]


def cmd_tune(args) -> int:
    cfg = _load_json(args.config)
    config = _tuning_config(cfg, args.workers)
    cohort = _load_cohort_dir(args.cohort_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = tuner.tune(cohort, config)
    if report.selected_mp is None:
        print("every grid value was infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    outputs = _emit_report(report, out, "tuning_report")
    _write_manifest(out, "tune", cfg | {"master_seed": config.master_seed},
                    config.master_seed, outputs)
    best = next(e for e in report.entries if e.mp == report.selected_mp)
    ci_txt = f" CI=({best.ci[0]:.4f}, {best.ci[1]:.4f})" if best.ci else ""
    print(f"selected M_p = {report.selected_mp:g} "
          f"(mean Brier {best.mean:.4f}{ci_txt})")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load_json(args.config)
    config = _tuning_config(cfg, args.workers)
    cohort = _load_cohort_dir(args.cohort_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = tuner.validate_report(cohort, args.mp, config)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    entry = report.entries[0]
    if not entry.feasible:
        print(f"every fold infeasible at mp={args.mp}", file=sys.stderr)
        return EXIT_INFEASIBLE
    outputs = _emit_report(report, out, "validation_report")
    _write_manifest(out, "validate", cfg | {"mp": args.mp, "master_seed": config.master_seed},
                    config.master_seed, outputs)
    ci_txt = f" CI=({entry.ci[0]:.4f}, {entry.ci[1]:.4f})" if entry.ci else ""
    print(f"holdout Brier at M_p={args.mp:g}: {entry.mean:.4f}{ci_txt}")
    return EXIT_OK


# --------------------------------------------------------------------------
# predict
# --------------------------------------------------------------------------

def _load_subject(path) -> dict:
    data = _load_json(path)
    for key in ("subject_id", "covariates", "measurements"):
        if key not in data:
            raise InputError(f"subject file missing {key!r}")
    times = tuple(float(m[0]) for m in data["measurements"])
    values = tuple(float(m[1]) for m in data["measurements"])
    return {
        "subject_id": str(data["subject_id"]),
        "covariates": data["covariates"],
        "times": times,
        "values": values,
        "observed_time": data.get("observed_time"),
    }


def _covariate_vector(raw, names) -> tuple[float, ...]:
    if isinstance(raw, dict):
        missing = [n for n in names if n not in raw]
        if missing:
            raise InputError(f"subject covariates missing {missing}")
        return tuple(float(raw[n]) for n in names)
    vec = tuple(float(v) for v in raw)
    if len(vec) != len(names):
        raise InputError(f"expected {len(names)} covariates ({', '.join(names)})")
    return vec


def _similar_ids(cohort, subject_id, covs, times, values, mp, t):
    """Rank the cohort against a new subject and take the top round(mp*n)."""
    trunc = dataset.truncate_history(cohort, t)
    fpca_model = fit_fpca(trunc, grid=np.linspace(0.0, t, 51))
    stdz = fit_standardization(cohort)
    feats = build_features(cohort, fpca_model, stdz, time_cutoff=t)
    vals = []
    schema_idx = {name: i for i, name in enumerate(cohort.schema)}
    for name, mu, sd in zip(stdz.names, stdz.means, stdz.sds):
        vals.append((covs[schema_idx[name]] - mu) / sd)
    r = fpca_model.n_selected
    if r and times:
        vals.extend(scores_for_subject(fpca_model, times, values)[:r].tolist())
    else:
        vals.extend([0.0] * r)
    index_vec = FeatureVector(subject_id, tuple(float(v) for v in vals))
    ranking = rank_similar(index_vec, feats)
    return select_subpopulation(ranking, mp, cohort.n_subjects)


def cmd_predict(args) -> int:
    if (args.fit is None) == (args.cohort_dir is None):
        raise InputError("provide exactly one of --fit or --cohort-dir")
    subject = _load_subject(args.subject)
    if subject["observed_time"] is not None and subject["observed_time"] < args.t:
        raise NotAtRiskError(
            f"subject observed_time {subject['observed_time']} < landmark t={args.t}"
        )
    seed = _env_seed()
    if seed is None:
        seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    hist = [(s, v) for s, v in zip(subject["times"], subject["values"]) if s <= args.t]
    times = tuple(s for s, _ in hist)
    values = tuple(v for _, v in hist)
    m_used = None

    if args.fit is not None:
        fit = load_fit(args.fit)
    else:
        cohort = _load_cohort_dir(args.cohort_dir)
        mcmc = McmcConfig(seed=seed)
        if args.mp is not None:
            covs = _covariate_vector(subject["covariates"], cohort.schema)
            ids = _similar_ids(cohort, subject["subject_id"], covs, times, values,
                               args.mp, args.t)
            m_used = len(ids)
            cohort = cohort.subset(ids)
        fit = fit_joint(cohort, JointModelSpec(mcmc=mcmc))

    covs = _covariate_vector(subject["covariates"], fit.covariate_names)
    req = PredictionRequest(
        history_times=times, history_values=values, covariates=covs,
        t=args.t, u=args.u, n_mc=args.n_mc, seed=seed,
    )
    res = predict_survival(fit, req)
    payload = {
        "subject_id": subject["subject_id"],
        "t": args.t,
        "u": args.u,
        "pi_hat": res.pi_hat,
        "mc_std_error": res.mc_std_error,
        "extrapolated": res.extrapolated,
    }
    pred_path = out / "prediction.json"
    _atomic_write_text(pred_path, json.dumps(payload, indent=2))
    outputs = [pred_path]
    if args.save_fit:
        fit_path = out / "fit.json"
        _atomic(fit_path, lambda tmp: save_fit(fit, tmp))
        outputs.append(fit_path)
    manifest_cfg = {"subject": subject["subject_id"], "t": args.t, "u": args.u,
                    "mp": args.mp, "m_used": m_used, "n_mc": args.n_mc, "seed": seed}
    _write_manifest(out, "predict", manifest_cfg, seed, outputs)
    print(json.dumps(payload))
    return EXIT_OK


# --------------------------------------------------------------------------
# score
# --------------------------------------------------------------------------

def cmd_score(args) -> int:
    from . import scoring

    path = Path(args.input)
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    import csv as _csv

    losses = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.DictReader(fh)
        need = {"subject_id", "observed_time", "event", "pi_u_given_t"}
        if reader.fieldnames is None or not need.issubset(set(reader.fieldnames)):
            raise InputError(
                f"score input needs columns {sorted(need)} "
                f"(optional pi_u_given_T), got {reader.fieldnames}"
            )
        for i, row in enumerate(reader, start=2):
            try:
                pi_tj_raw = (row.get("pi_u_given_T") or "").strip()
                losses.append(scoring.subject_loss(
                    row["subject_id"],
                    float(row["observed_time"]),
                    row["event"].strip() == "1",
                    float(row["pi_u_given_t"]),
                    float(pi_tj_raw) if pi_tj_raw else None,
                    args.t, args.u,
                ))
            except (ValueError, KeyError) as exc:
                raise InputError(f"{path}: row {i}: {exc}") from None
    if not losses:
        raise InputError("no subjects in score input")
    est = scoring.brier(losses, len(losses), args.t, args.u)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    losses_path = out / "subject_losses.csv"

    def _write_losses(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh, lineterminator="\n")
            writer.writerow(["subject_id", "loss", "branch"])
            for l in losses:
                writer.writerow([l.subject_id, repr(l.loss), l.branch])

    _atomic(losses_path, _write_losses)
    score_path = out / "score.json"
    _atomic_write_text(score_path, json.dumps({
        "brier": est.value, "at_risk": est.at_risk_count, "t": args.t, "u": args.u,
    }, indent=2))
    _write_manifest(out, "score", {"input": str(path), "t": args.t, "u": args.u},
                    None, [losses_path, score_path])
    print(f"Brier score: {est.value:.6f} over {est.at_risk_count} subjects")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jdp",
        description="Joint longitudinal-survival modelling with "
                    "similarity-personalized dynamic prediction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic cohort")
    p.add_argument("--config", required=True, help="scenario config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tune", help="grid-search the subpopulation proportion")
    p.add_argument("--cohort-dir", required=True)
    p.add_argument("--config", required=True, help="tuning config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("validate", help="evaluate a holdout at a fixed proportion")
    p.add_argument("--cohort-dir", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--mp", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("predict", help="dynamic survival prediction for one subject")
    p.add_argument("--fit", help="serialized fit JSON (skips refitting)")
    p.add_argument("--cohort-dir", help="fit on this cohort instead")
    p.add_argument("--subject", required=True, help="subject history JSON")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--u", type=float, required=True)
    p.add_argument("--mp", type=float, help="similarity-filter the cohort first")
    p.add_argument("--n-mc", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-fit", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("score", help="Brier score from a predictions CSV")
    p.add_argument("--input", required=True,
                   help="CSV: subject_id,observed_time,event,pi_u_given_t[,pi_u_given_T]")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--u", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)
    return parser


_STARTED = _now()


def main(argv=None) -> int:
    global _STARTED
    _STARTED = _now()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NotAtRiskError as exc:
        print(f"not at risk: {exc}", file=sys.stderr)
        return EXIT_NOT_AT_RISK
    except AllInfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (dataset.CohortParseError, dataset.CohortIntegrityError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
