"""Command-line interface: ``funnel simulate | fit | baselines | evaluate | diagnose``.

Every command writes its outputs into one directory together with a
``manifest.json`` recording the options and input digests.

Exit codes: 0 success, 1 input or data error, 2 convergence warning,
3 simulation-validity failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from importlib import metadata
from importlib.resources import files
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import dataio
from .baselines import VARIANTS, BaselineSpec, EmptyTrainingView, fit_baseline, predict_proba
from .dataio import FeatureDictionary, load_dataset
from .inference import McmcOptions, PosteriorSamples, fit_map, fit_mcmc
from .metrics import (
    _clean,
    EvaluationReport,
    acuity_regression,
    funnel_task_scores,
    mae_params,
    posterior_predictive_rates,
    score_tasks,
    task_labels,
)
from .model import DataError, PriorSpec, parameter_names, stage_linear_predictor
from .simulate import SimulationSpec, default_config, simulate_accepted

log = logging.getLogger("funnel")

EXIT_OK, EXIT_DATA, EXIT_CONVERGENCE, EXIT_SIMULATION = 0, 1, 2, 3
RHAT_LIMIT = 1.05
THREADS_ENV = "FUNNEL_THREADS"


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, args: argparse.Namespace, inputs: dict, outputs: Sequence[str],
                   seeds: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    options = {k: v for k, v in vars(args).items() if k not in ("func",)}
    options = json.loads(json.dumps(options, default=str))
    doc = {
        "format": "funnel-manifest",
        "version": dataio.FORMAT_VERSION,
        "tool_version": _version(),
        "command": args.command,
        "options": options,
        "seeds": seeds or {},
        "inputs": {k: {"path": str(p), "sha256": _digest(p)} for k, p in inputs.items() if p is not None},
        "outputs": sorted(outputs),
    }
    if extra:
        doc.update(extra)
    dataio._atomic_write(out / "manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get(THREADS_ENV, "1")))


def _priors(name: str) -> PriorSpec:
    return PriorSpec.mimic() if name == "mimic" else PriorSpec()


def _load(args, passthrough: Sequence[str] = ()):
    dictionary = FeatureDictionary.load(args.dictionary)
    return load_dataset(args.data, dictionary, args.observation_stage, _priors(args.priors), passthrough)


def _write_json(path: Path, doc) -> None:
    dataio._atomic_write(path, json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n")


# -- simulate ----------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.n_patients < 1 or args.max_tries < 1 or args.min_per_pathway < 0:
        raise UsageError("--n-patients and --max-tries must be positive, --min-per-pathway non-negative")
    out = Path(args.out)
    spec = SimulationSpec(n_patients=args.n_patients, config=default_config(), min_per_pathway=args.min_per_pathway,
                          seed=args.seed, allow_skips=not args.no_skips)
    try:
        truth, data, counts, attempt = simulate_accepted(spec, max_tries=args.max_tries)
    except RuntimeError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SIMULATION
    cfg = spec.config
    dictionary = FeatureDictionary.identity(cfg.feature_names, cfg.first_stage_of_feature, cfg.n_stages)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_dataset(out / "dataset.csv", data.records, cfg)
    dataio._atomic_write(out / "dictionary.json", dictionary.to_json() + "\n")
    ids = [r.visit_id for r in data.records]
    full = pd.DataFrame(data.full_features, columns=cfg.feature_names)
    full.insert(0, "visit_id", ids)
    dataio._atomic_write(out / "full_features.csv", full.to_csv(index=False, float_format=dataio.FLOAT_FMT,
                                                                lineterminator="\n"))
    outcomes = pd.DataFrame({"visit_id": ids, "outcome": data.full_outcomes})
    dataio._atomic_write(out / "full_outcomes.csv", outcomes.to_csv(index=False, lineterminator="\n"))
    dataio.save_ground_truth(out / "truth.json", truth, args.seed, {"attempt": attempt, "pathway_counts": counts})
    outputs = ["dataset.csv", "dictionary.json", "full_features.csv", "full_outcomes.csv", "truth.json"]
    write_manifest(out, args, {}, outputs, {"seed": args.seed, "accepted_attempt": attempt},
                   {"pathway_counts": counts})
    print(f"simulated {args.n_patients} patients (attempt {attempt}); pathway counts: {counts}")
    return EXIT_OK


# -- fit ---------------------------------------------------------------------------

def _rhat_table(samples: PosteriorSamples) -> str:
    lines = [f"{'parameter':<28s} {'mean':>10s} {'sd':>9s} {'rhat':>7s}"]
    flat = samples.flat
    for j, name in enumerate(samples.names):
        lines.append(f"{name:<28s} {flat[:, j].mean():10.4f} {flat[:, j].std(ddof=1):9.4f} {samples.rhat[name]:7.3f}")
    return "\n".join(lines)


def cmd_fit(args) -> int:
    out = Path(args.out)
    loaded = _load(args)
    config = loaded.config
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["params.json", "transform_stats.json"]
    _write_json(out / "transform_stats.json", loaded.stats)
    names = config.feature_names
    code = EXIT_OK
    if args.mode == "map":
        res = fit_map(loaded.records, config, max_iter=args.max_iter)
        dataio.save_params(out / "params.json", res.params,
                           {"kind": "map", "feature_names": names, "log_posterior": res.log_posterior,
                            "grad_norm": res.grad_norm, "converged": res.converged})
        print(f"MAP log posterior {res.log_posterior:.4f}, gradient norm {res.grad_norm:.2e}")
        if not res.converged:
            code = EXIT_CONVERGENCE
    else:
        opts = McmcOptions(n_chains=args.chains, n_warmup=args.warmup, n_samples=args.samples, seed=args.seed,
                           target_accept=args.target_accept, n_jobs=_threads(args), metric=args.metric)
        samples = fit_mcmc(loaded.records, config, opts)
        dataio.save_samples(out / "samples.csv", out / "samples.json", samples)
        dataio.save_params(out / "params.json", samples.mean_params(config.n_features),
                           {"kind": "posterior_mean", "feature_names": names})
        outputs += ["samples.csv", "samples.json"]
        print(_rhat_table(samples))
        print(f"divergences per chain: {samples.divergences}")
        if samples.max_rhat > RHAT_LIMIT:
            bad = [n for n, v in samples.rhat.items() if v > RHAT_LIMIT]
            print(f"warning: R-hat above {RHAT_LIMIT} for {bad}", file=sys.stderr)
            code = EXIT_CONVERGENCE
    write_manifest(out, args, {"data": args.data, "dictionary": args.dictionary}, outputs, {"seed": args.seed})
    return code


# -- baselines ---------------------------------------------------------------------

def _read_full_features(path, records, names) -> np.ndarray:
    df = pd.read_csv(path, dtype={"visit_id": str}, float_precision="round_trip")
    missing = [c for c in ["visit_id"] + list(names) if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    df = df.set_index("visit_id")
    ids = [r.visit_id for r in records]
    absent = [i for i in ids if i not in df.index]
    if absent:
        raise DataError(f"{path}: no row for visit ids {absent[:5]}")
    return df.loc[ids, list(names)].to_numpy(dtype=float)


def _coef_doc(fit, n_features: int, variant: str, names) -> dict:
    beta = fit.full_beta(n_features)
    values = {"alpha": fit.alpha}
    values.update({f"beta_{j + 1}": float(b) for j, b in enumerate(beta)})
    return {"format": "funnel-baseline", "version": dataio.FORMAT_VERSION, "variant": variant,
            "feature_names": list(names), "values": values, "converged": bool(fit.converged),
            "n_iter": int(fit.n_iter), "columns_used": [int(c) for c in fit.columns]}


def _coef_to_fit_vector(doc: dict, n_features: int):
    v = doc["values"]
    return float(v["alpha"]), np.array([v[f"beta_{j + 1}"] for j in range(n_features)])


def cmd_baselines(args) -> int:
    out = Path(args.out)
    loaded = _load(args)
    config = loaded.config
    names = config.feature_names
    full = _read_full_features(args.full_features, loaded.records, names) if args.full_features else None
    # scoring always uses every feature available; without the full matrix, fall back to the observed one
    X_score = full if full is not None else np.array([r.features for r in loaded.records])
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    preds = []
    for variant in args.variants:
        try:
            fit = fit_baseline(loaded.records, full, config, BaselineSpec(variant, l2=args.l2))
        except EmptyTrainingView as err:
            raise DataError(str(err)) from None
        _write_json(out / f"baseline_{variant}.json", _coef_doc(fit, config.n_features, variant, names))
        outputs.append(f"baseline_{variant}.json")
        Xs = X_score.copy()
        Xs[:, fit.columns] = np.nan_to_num(Xs[:, fit.columns], nan=0.0)
        p = predict_proba(fit, Xs)
        preds.append(pd.DataFrame({"visit_id": [r.visit_id for r in loaded.records], "method": variant,
                                   "mortality": p, "admission": p}))
    pred = pd.concat(preds, ignore_index=True)
    dataio._atomic_write(out / "predictions.csv", pred.to_csv(index=False, float_format=dataio.FLOAT_FMT,
                                                              lineterminator="\n"))
    outputs.append("predictions.csv")
    write_manifest(out, args, {"data": args.data, "dictionary": args.dictionary, "full_features": args.full_features},
                   outputs)
    print(f"fitted baselines: {', '.join(args.variants)}")
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------------

PREDICTION_COLUMNS = ("visit_id", "method", "mortality", "admission")


def _read_predictions(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"visit_id": str, "method": str})
    missing = [c for c in PREDICTION_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}: prediction file lacks columns {missing}")
    for c in ("mortality", "admission"):
        v = df[c].to_numpy(dtype=float)
        if np.any(~np.isfinite(v)) or np.any((v < 0) | (v > 1)):
            raise DataError(f"{path}: column {c!r} must hold probabilities in [0, 1]")
    return df


def _param_groups(names) -> dict[str, list[str]]:
    groups = {"alpha": ["alpha"], "beta": [n for n in names if n.startswith("beta_")]}
    for prefix in ("t_", "delta_"):
        groups.update({n: [n] for n in names if n.startswith(prefix)})
    return groups


def _funnel_draws(args, n_features: int):
    if args.samples:
        samples = dataio.load_samples(args.samples, _sidecar(args.samples))
        return list(samples.iter_params(n_features, args.max_draws)), samples
    if args.params:
        return [dataio.load_params(args.params)], None
    return None, None


def _sidecar(samples_csv) -> Path:
    p = Path(samples_csv)
    return p.with_suffix(".json")


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    loaded = _load(args)
    config = loaded.config
    records = loaded.records
    d = config.n_features
    report = EvaluationReport()
    truth = dataio.load_params(args.truth) if args.truth else None
    truth_map = dict(zip(truth.names(), truth.to_vector())) if truth is not None else None
    draws, samples = _funnel_draws(args, d)
    names = parameter_names(d, config.n_stages)

    if truth_map is not None:
        if draws is not None:
            est = dict(zip(names, np.mean([p.to_vector() for p in draws], axis=0)))
            report.mae["funnel"] = {g: mae_params(est, truth_map, ns) for g, ns in _param_groups(names).items()}
        for path in args.baseline_coefs or []:
            doc = json.loads(Path(path).read_text())
            if doc.get("format") != "funnel-baseline":
                raise DataError(f"{path}: not a baseline coefficient file")
            groups = _param_groups(["alpha"] + [f"beta_{j + 1}" for j in range(d)])
            report.mae[doc["variant"]] = {g: mae_params(doc["values"], truth_map, ns) for g, ns in groups.items()}

    full_outcomes = None
    if args.full_outcomes:
        fo = pd.read_csv(args.full_outcomes, dtype={"visit_id": str}).set_index("visit_id")
        try:
            full_outcomes = fo.loc[[r.visit_id for r in records], "outcome"].to_numpy(dtype=int)
        except KeyError as err:
            raise DataError(f"{args.full_outcomes}: {err}") from None
    tasks = task_labels(records, full_outcomes, config)
    if draws is not None:
        if args.full_features:
            full = _read_full_features(args.full_features, records, config.feature_names)
        else:
            full = np.array([r.features for r in records])
        if np.all(np.isfinite(full)):
            scores = funnel_task_scores(draws, records, full, config)
            report.predictive["funnel"] = score_tasks(scores, tasks, args.n_bins)
        else:
            report.notes.append("funnel admission scores need every feature; pass --full-features")
    ids = [r.visit_id for r in records]
    for path in args.predictions or []:
        df = _read_predictions(path)
        for method, sub in df.groupby("method", sort=True):
            sub = sub.set_index("visit_id")
            if not set(ids) <= set(sub.index):
                raise DataError(f"{path}: method {method!r} lacks predictions for some visits")
            sub = sub.loc[ids]
            scores = {"mortality": sub["mortality"].to_numpy(float), "admission": sub["admission"].to_numpy(float)}
            report.predictive[method] = score_tasks(scores, tasks, args.n_bins)
    if full_outcomes is None:
        report.notes.append("mortality on censored patients not scored: no full outcomes supplied")

    report.validate()
    doc = json.loads(report.to_json())
    validate_report(doc)
    out.mkdir(parents=True, exist_ok=True)
    dataio._atomic_write(out / "report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    t1 = pd.DataFrame(report.table1_rows(), columns=["method", "parameter", "mae"])
    t2 = pd.DataFrame(report.table2_rows(), columns=["method", "task", "auroc", "ece", "n"])
    dataio._atomic_write(out / "table1.csv", t1.to_csv(index=False, float_format="%.6g", lineterminator="\n"))
    dataio._atomic_write(out / "table2.csv", t2.to_csv(index=False, float_format="%.6g", lineterminator="\n"))
    inputs = {"data": args.data, "dictionary": args.dictionary, "truth": args.truth, "samples": args.samples,
              "params": args.params, "full_outcomes": args.full_outcomes, "full_features": args.full_features}
    for i, p in enumerate(args.predictions or []):
        inputs[f"predictions_{i}"] = p
    for i, p in enumerate(args.baseline_coefs or []):
        inputs[f"baseline_coefs_{i}"] = p
    write_manifest(out, args, inputs, ["report.json", "table1.csv", "table2.csv"])
    if not t2.empty:
        print(t2.to_string(index=False))
    return EXIT_OK


def report_schema() -> dict:
    return json.loads(files("funnel").joinpath("schemas/report.schema.json").read_text())


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, report_schema())


# -- diagnose ----------------------------------------------------------------------

def cmd_diagnose(args) -> int:
    out = Path(args.out)
    passthrough = [c for c in (args.acuity_column, args.group_column) if c]
    loaded = _load(args, passthrough)
    config = loaded.config
    records = loaded.records
    draws, _ = _funnel_draws(args, config.n_features)
    if draws is None:
        raise UsageError("diagnose needs --samples or --params")
    report = EvaluationReport()
    report.posterior_predictive = posterior_predictive_rates(draws, records, config)
    pt = loaded.passthrough
    if args.acuity_column in pt.columns and args.group_column in pt.columns:
        acuity = pd.to_numeric(pt[args.acuity_column].str.strip(), errors="coerce").to_numpy()
        group = pt[args.group_column].str.strip().to_numpy()
        male = group == args.male_value
        female = group == args.female_value
        keep = np.isfinite(acuity) & (male | female)
        X1 = np.array([r.features for r in records])[keep]
        risk = np.mean([_stage1_risk(X1, p, config) for p in draws], axis=0)
        report.acuity = acuity_regression(acuity[keep], male[keep], female[keep], risk)
        report.notes.append(f"acuity regression on {int(keep.sum())} patients; risk = stage-1 base rate")
    else:
        absent = [c for c in (args.acuity_column, args.group_column) if c not in pt.columns]
        report.notes.append(f"acuity regression skipped: column(s) {absent} not present")
    doc = json.loads(report.to_json())
    validate_report(doc)
    out.mkdir(parents=True, exist_ok=True)
    ppc = pd.DataFrame(report.posterior_predictive, columns=["kind", "group", "n", "observed", "expected", "se", "z"])
    dataio._atomic_write(out / "posterior_predictive.csv",
                         ppc.to_csv(index=False, float_format="%.6g", lineterminator="\n"))
    dataio._atomic_write(out / "diagnostics.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_manifest(out, args, {"data": args.data, "dictionary": args.dictionary, "samples": args.samples,
                               "params": args.params}, ["posterior_predictive.csv", "diagnostics.json"])
    print(ppc.to_string(index=False))
    for note in report.notes:
        print(f"note: {note}")
    return EXIT_OK


def _stage1_risk(X, params, config):
    from scipy.special import expit

    return expit(stage_linear_predictor(X, 1, params, config))


# -- argument parsing --------------------------------------------------------------

def _add_data_args(p):
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--dictionary", required=True, help="feature dictionary JSON")
    p.add_argument("--observation-stage", type=int, default=2, help="first stage that reveals the outcome")
    p.add_argument("--priors", choices=("default", "mimic"), default="default",
                   help="prior preset; 'mimic' centres the intercept at -5")


def _add_draw_args(p):
    p.add_argument("--samples", help="posterior samples CSV (diagnostics JSON alongside, same stem)")
    p.add_argument("--params", help="point-estimate params JSON (used when --samples is absent)")
    p.add_argument("--max-draws", type=int, default=200, help="posterior draws used for predictions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funnel", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker cap (default: ${THREADS_ENV} or 1); results do not depend on it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with known parameters")
    p.add_argument("--n-patients", type=int, default=50000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-per-pathway", type=int, default=10)
    p.add_argument("--max-tries", type=int, default=100, help="ground-truth redraws before giving up")
    p.add_argument("--no-skips", action="store_true", help="disable direct admission past the next stage")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the funnel model (MAP or MCMC)")
    _add_data_args(p)
    p.add_argument("--mode", choices=("map", "mcmc"), default="mcmc")
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--warmup", type=int, default=500)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--target-accept", type=float, default=0.8)
    p.add_argument("--metric", choices=("dense", "diag"), default="dense")
    p.add_argument("--max-iter", type=int, default=1000, help="MAP optimiser iterations")
    # also accepted after the subcommand; SUPPRESS keeps the global value when absent here
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker cap for parallel chains")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("baselines", help="fit censoring-naive logistic baselines")
    _add_data_args(p)
    p.add_argument("--full-features", help="uncensored feature CSV (synthetic data only)")
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--l2", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baselines)

    p = sub.add_parser("evaluate", help="parameter MAE and AUROC/ECE report")
    _add_data_args(p)
    _add_draw_args(p)
    p.add_argument("--truth", help="ground-truth params JSON")
    p.add_argument("--baseline-coefs", nargs="*", help="baseline coefficient JSONs for MAE")
    p.add_argument("--predictions", nargs="*",
                   help="prediction CSVs with columns visit_id,method,mortality,admission")
    p.add_argument("--full-outcomes", help="uncensored outcomes CSV (visit_id,outcome)")
    p.add_argument("--full-features", help="uncensored feature CSV for admission scores")
    p.add_argument("--n-bins", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="posterior predictive rates and acuity regression")
    _add_data_args(p)
    _add_draw_args(p)
    p.add_argument("--acuity-column", default="acuity")
    p.add_argument("--group-column", default="gender")
    p.add_argument("--male-value", default="M")
    p.add_argument("--female-value", default="F")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, FileNotFoundError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
