"""Command-line entry point: ``bitqoe <subcommand> ...``.

Exit status is 0 on success, 1 on runtime errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, harness, report, synth
from .data import (FeatureRanking, QualityDataset, detect_diff_scale, load_dataset_csv,
                   reorder_by_ranking, select_top_k, write_dataset_csv)
from .gp import GpModel, GpParams
from .metrics import evaluate
from .mlp import MlpModel, MlpParams
from .trees import EnsembleParams, ForestModel

log = logging.getLogger("bitqoe")

DECISIONS = {
    "rmse_denominator": "1/N unless --dof-correction is set",
    "rmse_star_without_ci": "epsilon 0 (RMSE* equals RMSE), reported as not attempted",
    "fisher_test": "two-tailed normal approximation, critical value 1.959964",
    "spearman_ties": "average ranks",
    "stratification_bins": "equal-frequency MOS bins, default 5",
    "metric_pooling": "metrics on pooled held-out predictions per repeat, then averaged",
    "rf_rows": "sampled without replacement",
    "bg_rows": "sampled with replacement",
    "bg_max_features": "column subset drawn once per tree",
    "mlp_hidden_units": "number of input features unless --hidden is set",
    "mlp_activations": "tanh hidden, softplus output; inputs standardized on the training fold",
    "mlp_adadelta": "rho 0.95, eps 1e-6, uniform init half-range 0.05",
    "gp_function_set": "add sub mul div + sqrt log abs neg inv + max min; no trigonometry",
    "gp_init": "full method, depth drawn from 2..6, constants uniform on [-1, 1]",
    "gp_depth_cap": "17 on crossover and subtree mutation",
}


class UsageError(Exception):
    pass


# --- argument parsing -----------------------------------------------------------

def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default="synth",
                   help="dataset CSV, or 'synth' for the built-in synthetic grid (default)")
    p.add_argument("--grid", choices=("full", "tiny"), default="full",
                   help="synthetic grid when --data synth")
    p.add_argument("--synth-seed", type=int, default=0, help="seed of the synthetic dataset")
    p.add_argument("--columns", help="comma-separated feature whitelist")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed (env QOE_SEED overrides)")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="worker processes; results do not depend on this")


def _add_model(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model hyperparameters (defaults are the full-budget configuration)")
    g.add_argument("--trees", type=int, default=166)
    g.add_argument("--max-features", type=float, help="RF default 0.4, BG default 1.0")
    g.add_argument("--max-sample", type=float, help="RF default 0.8, BG default 0.4")
    g.add_argument("--bootstrap", dest="bootstrap", action="store_true", default=None)
    g.add_argument("--no-bootstrap", dest="bootstrap", action="store_false")
    g.add_argument("--max-depth", type=int)
    g.add_argument("--hidden", type=int, help="MLP hidden units (default: input count)")
    g.add_argument("--epochs", type=int, default=440)
    g.add_argument("--batch-size", type=int, default=4)
    g.add_argument("--population", type=int, default=5000)
    g.add_argument("--generations", type=int, default=200)
    g.add_argument("--tournament", type=int, default=20)
    g.add_argument("--parsimony", type=float, default=0.001)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bitqoe", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic bitstream dataset CSV")
    p.add_argument("--grid", choices=("full", "tiny"), default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rank", help="leave-one-out Random-Forest feature ranking")
    _add_data(p)
    _add_common(p)
    _add_model(p)
    p.add_argument("--out", required=True, help="ranking CSV")

    p = sub.add_parser("sweep", help="top-k feature sweep for one or more algorithms")
    _add_data(p)
    _add_common(p)
    _add_model(p)
    p.add_argument("--algo", default="rf", help="rf, bg, mlp, gp, comma list, or 'all'")
    p.add_argument("--kmax", type=int, default=125)
    p.add_argument("--ranking", default="auto",
                   help="ranking CSV, 'auto' (LOO RF ranking) or 'none' (column order)")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--folds", type=int, help="default 10 for rf/bg, 4 for mlp/gp")
    p.add_argument("--loo", action="store_true", help="leave-one-out instead of k-fold")
    p.add_argument("--bins", type=int, default=5, help="MOS stratification bins")
    p.add_argument("--metric-pooling", choices=("pooled", "perfold"), default="pooled")
    p.add_argument("--dof-correction", type=int, default=0)
    p.add_argument("--fisher-n", type=int, default=160)
    p.add_argument("--out", help="output directory (default runs/sweep-<algo>-seed<seed>)")

    p = sub.add_parser("train", help="fit one model and save it as JSON")
    _add_data(p)
    _add_common(p)
    _add_model(p)
    p.add_argument("--algo", required=True, choices=harness.ALGORITHMS)
    p.add_argument("--k", type=int, help="use the top-k ranked features")
    p.add_argument("--ranking", default="none", help="ranking CSV, 'auto' or 'none'")
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="score a CSV with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predictions CSV")

    p = sub.add_parser("compare", help="Fisher-z significance tables from stored sweeps")
    p.add_argument("runs", nargs="+", help="run directories or sweep_<algo>.csv files")
    p.add_argument("--selector", choices=("per-algorithm", "global"), default="global")
    p.add_argument("--n", type=int, default=160)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="re-emit summary and comparisons of a stored run")
    p.add_argument("run", help="run directory containing manifest.json")
    p.add_argument("--verify", action="store_true", help="check the input file hash")
    p.add_argument("--fisher-n", type=int)
    return ap


# --- helpers ----------------------------------------------------------------------

def _seed(args) -> int:
    env = os.environ.get("QOE_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"QOE_SEED must be an integer, got {env!r}") from None
    return args.seed


def _load(args) -> tuple[QualityDataset, dict]:
    cols = args.columns.split(",") if getattr(args, "columns", None) else None
    if args.data == "synth":
        grid = synth.FULL_GRID if args.grid == "full" else synth.TINY_GRID
        ds = synth.generate_dataset(grid, args.synth_seed)
        if cols:
            ds = reorder_by_ranking(ds, cols)
        info = {"kind": "synthetic", "grid": args.grid, "seed": args.synth_seed,
                "mos_source": synth.MOS_LABEL}
    else:
        ds = load_dataset_csv(args.data, cols)
        info = {"kind": "csv", "path": str(args.data),
                "sha256": report.sha256_file(args.data)}
    info["rows"] = ds.n_samples
    info["features"] = ds.n_features
    info["has_ci"] = ds.has_ci
    info["diff_scale"] = detect_diff_scale(ds)
    return ds, info


def _ensemble_params(algo: str, args, seed: int) -> EnsembleParams:
    base = EnsembleParams.random_forest() if algo == "rf" else EnsembleParams.bagging()
    kw = {"n_trees": args.trees, "seed": seed, "max_depth": args.max_depth}
    if args.max_features is not None:
        kw["feature_fraction"] = args.max_features
    if args.max_sample is not None:
        kw["sample_fraction"] = args.max_sample
    if args.bootstrap is not None:
        kw["bootstrap"] = args.bootstrap
    return replace(base, **kw)


def _params(algo: str, args, seed: int):
    if algo in ("rf", "bg"):
        return _ensemble_params(algo, args, seed)
    if algo == "mlp":
        return MlpParams(hidden_units=args.hidden, epochs=args.epochs,
                         batch_size=args.batch_size, seed=seed)
    return GpParams(population_size=args.population, generations=args.generations,
                    tournament_size=args.tournament,
                    parsimony_coefficient=args.parsimony, seed=seed)


def _ranking(ds: QualityDataset, choice: str, args, seed: int) -> FeatureRanking | None:
    if choice == "none":
        return None
    if choice == "auto":
        log.info("ranking %d features with %d leave-one-out forests", ds.n_features, ds.n_samples)
        return harness.rank_features_loo(ds, _ensemble_params("rf", args, seed), args.workers)
    return FeatureRanking.from_csv(choice)


def _algos(choice: str) -> list[str]:
    algos = list(harness.ALGORITHMS) if choice == "all" else [a.strip() for a in choice.split(",")]
    bad = [a for a in algos if a not in harness.ALGORITHMS]
    if bad or not algos:
        raise UsageError(f"unknown algorithm(s) {bad}; choose from {harness.ALGORITHMS}")
    return algos


def _manifest(args, seed: int, input_info: dict | None, **extra) -> dict:
    params = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    m = {"subcommand": args.command, "arguments": params, "master_seed": seed,
         "tool_version": __version__, "decisions": DECISIONS}
    if input_info is not None:
        m["input"] = input_info
        if input_info.get("mos_source"):
            m["mos_source"] = input_info["mos_source"]
    m.update(extra)
    return m


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- subcommands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = _seed(args)
    grid = synth.FULL_GRID if args.grid == "full" else synth.TINY_GRID
    ds = synth.generate_dataset(grid, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(ds, out)
    _write_json(out.with_name(out.name + ".manifest.json"),
                _manifest(args, seed, None, mos_source=synth.MOS_LABEL,
                          output={"path": out.name, "sha256": report.sha256_file(out),
                                  "rows": ds.n_samples, "features": ds.n_features}))
    print(f"wrote {ds.n_samples} rows x {ds.n_features} features to {out} "
          f"(MOS is a {synth.MOS_LABEL})")
    return 0


def cmd_rank(args) -> int:
    seed = _seed(args)
    ds, info = _load(args)
    ranking = _ranking(ds, "auto", args, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ranking.to_csv(out)
    _write_json(out.with_name(out.name + ".manifest.json"),
                _manifest(args, seed, info, models=ds.n_samples))
    for name, imp in ranking.entries[:10]:
        print(f"{imp:8.4f}  {name}")
    return 0


def cmd_sweep(args) -> int:
    seed = _seed(args)
    algos = _algos(args.algo)
    ds, info = _load(args)
    ranking = _ranking(ds, args.ranking, args, seed)
    if ranking is not None:
        ds = reorder_by_ranking(ds, ranking)
    if not 1 <= args.kmax <= ds.n_features:
        raise UsageError(f"--kmax must lie in 1..{ds.n_features}")
    out = Path(args.out or f"runs/sweep-{'-'.join(algos)}-seed{seed}")
    out.mkdir(parents=True, exist_ok=True)
    sweeps = []
    for algo in algos:
        base = harness.default_scheme(algo, seed, args.repeats)
        scheme = replace(base, kind="loo" if args.loo else "stratified_kfold",
                         k=args.folds or base.k, n_bins=args.bins,
                         pooling=args.metric_pooling, dof_correction=args.dof_correction)
        log.info("sweep %s: k=1..%d, %d repeats", algo, args.kmax, scheme.repeats)
        sweeps.append(harness.feature_sweep(ds, algo, scheme, args.kmax,
                                            _params(algo, args, seed), args.workers))
    if ranking is not None:
        ranking.to_csv(out / "ranking.csv")
    manifest = _manifest(args, seed, info,
                         sweeps={s.algorithm: s.config for s in sweeps},
                         ranking=args.ranking if args.ranking in ("auto", "none") else
                         {"path": args.ranking, "sha256": report.sha256_file(args.ranking)})
    report.emit_report(out, sweeps, manifest, ds.has_ci, args.fisher_n)
    summary = json.loads((out / "summary.json").read_text())
    for algo, entry in summary["algorithms"].items():
        best = entry["max_pearson"]
        if best:
            print(f"{algo}: max Pearson {best['value']:.4f} with {best['features']} features")
        else:
            print(f"{algo}: Pearson undefined (constant predictions)")
    if info.get("mos_source"):
        print(f"note: targets are a {info['mos_source']}, not subjective scores")
    print(f"outputs in {out}")
    return 0


def cmd_train(args) -> int:
    seed = _seed(args)
    ds, info = _load(args)
    ranking = _ranking(ds, args.ranking, args, seed)
    if ranking is not None:
        ds = reorder_by_ranking(ds, ranking)
    if args.k is not None:
        ds = select_top_k(ds, args.k)
    params = _params(args.algo, args, seed)
    model = harness.fit_model(args.algo, ds, params, seed)
    doc = {"format": "bitqoe.model", "version": 1, "algorithm": args.algo,
           "feature_names": list(ds.column_names),
           "model": json.loads(model.to_json())}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    _write_json(out.with_name(out.name + ".manifest.json"), _manifest(args, seed, info))
    rep = evaluate(model.predict(ds.X), ds.mos, ds.ci95)
    print(f"trained {args.algo} on {ds.n_samples} rows x {ds.n_features} features; "
          f"training RMSE {rep.rmse:.4f}")
    return 0


def load_model(path: str | Path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "bitqoe.model":
        raise ValueError(f"{path} is not a bitqoe model file")
    inner = json.dumps(doc["model"])
    algo = doc["algorithm"]
    if algo in ("rf", "bg"):
        model = ForestModel.from_json(inner)
    elif algo == "mlp":
        model = MlpModel.from_json(inner)
    else:
        model = GpModel.from_json(inner)
    return algo, doc["feature_names"], model


def _read_columns(path: str, names: list[str]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    header = [c.strip() for c in rows[0]]
    missing = [n for n in names if n not in header]
    if missing:
        raise ValueError(f"{path}: missing feature columns {missing[:5]}")
    body = np.array([[float(c) for c in r] for r in rows[1:]])
    X = body[:, [header.index(n) for n in names]]
    extra = {c: body[:, header.index(c)] for c in ("MOS", "CI95") if c in header}
    return X, extra


def cmd_predict(args) -> int:
    algo, names, model = load_model(args.model)
    X, extra = _read_columns(args.data, names)
    pred = model.predict(X)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "prediction"] + (["MOS"] if "MOS" in extra else []))
        for i, p in enumerate(pred):
            w.writerow([i + 1, repr(float(p))] + ([repr(float(extra["MOS"][i]))]
                                                  if "MOS" in extra else []))
    print(f"{algo}: wrote {len(pred)} predictions to {out}")
    if "MOS" in extra:
        rep = evaluate(pred, extra["MOS"], extra.get("CI95"))
        print(f"RMSE {rep.rmse:.4f}  Pearson {rep.pearson if rep.pearson is not None else 'NA'}")
    return 0


def _stored_sweeps(paths: list[str]) -> list[harness.SweepResult]:
    sweeps = []
    for p in map(Path, paths):
        files = sorted(p.glob("sweep_*.csv")) if p.is_dir() else [p]
        if not files:
            raise ValueError(f"no sweep CSVs in {p}")
        for f in files:
            algo = f.stem.removeprefix("sweep_")
            sweeps.append(report.sweep_from_csv(f.read_text(encoding="utf-8"), algo))
    return sweeps


def cmd_compare(args) -> int:
    sweeps = _stored_sweeps(args.runs)
    tables = harness.compare_significance(sweeps, args.selector, args.n)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.comparison_to_csv(tables), encoding="utf-8")
    for t in tables:
        sig = sum(1 for r in t.rows if r.result and r.result.significant_at_05)
        print(f"baseline {t.baseline_id} (r={t.baseline_pearson:.4f}): "
              f"{sig}/{len(t.rows)} models differ at p<=0.05 (n={t.n})")
    print(report.FISHER_CAVEAT)
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    manifest_path = run / "manifest.json"
    if not manifest_path.exists():
        raise ValueError(f"{run} has no manifest.json")
    if args.verify:
        ok, msg = report.verify_manifest(manifest_path)
        print(msg)
        if not ok:
            return 1
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    sweeps = _stored_sweeps([str(run)])
    fisher_n = args.fisher_n or manifest.get("arguments", {}).get("fisher_n", 160)
    manifest.pop("outputs", None)
    report.emit_report(run, sweeps, manifest, manifest.get("input", {}).get("has_ci", False),
                       fisher_n)
    print(f"re-emitted report in {run}")
    return 0


COMMANDS = {"synth": cmd_synth, "rank": cmd_rank, "sweep": cmd_sweep, "train": cmd_train,
            "predict": cmd_predict, "compare": cmd_compare, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    if not args.command:
        parser.print_usage(sys.stderr)
        print("bitqoe: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bitqoe: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"bitqoe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
