"""Run manifests, sweep / comparison CSVs and the best-model summary."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Sequence

from . import __version__
from .harness import (METRICS, ComparisonTable, SweepResult, SweepRow,
                      compare_significance)

SWEEP_COLUMNS = ["k"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")] + [
    "n_repeats", "undefined_pearson"]
NA = "NA"

FISHER_CAVEAT = ("Fisher-z tests use the configured sample size although the "
                 "compared Pearson values are averages over repeated runs; "
                 "significance grows with sample size, read p-values accordingly.")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if v is None:
        return NA
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str):
    return None if v == NA else float(v)


def sweep_to_csv(sweep: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in sweep.rows:
        cells = [row.k]
        for m in METRICS:
            cells += [row.mean.get(m), row.std.get(m)]
        cells += [row.n_repeats, row.undefined_pearson]
        w.writerow([_fmt(c) for c in cells])
    return buf.getvalue()


def sweep_from_csv(text: str, algorithm: str) -> SweepResult:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != SWEEP_COLUMNS:
        raise ValueError("unexpected sweep CSV header")
    out = []
    for r in rows[1:]:
        rec = dict(zip(SWEEP_COLUMNS, r))
        mean = {m: _parse(rec[f"{m}_mean"]) for m in METRICS}
        std = {m: _parse(rec[f"{m}_std"]) for m in METRICS}
        out.append(SweepRow(int(rec["k"]), mean, std, int(rec["n_repeats"]),
                            int(rec["undefined_pearson"])))
    return SweepResult(algorithm, out)


def comparison_to_csv(tables: Sequence[ComparisonTable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["baseline", "baseline_pearson", "model", "pearson", "z_stat",
                "p_value", "significant_at_05", "n"])
    for t in tables:
        for row in t.rows:
            res = row.result
            w.writerow([_fmt(c) for c in (
                t.baseline_id, t.baseline_pearson, row.model_id, row.pearson,
                None if res is None else res.z_stat,
                None if res is None else res.p_value,
                None if res is None else res.significant_at_05, t.n)])
    return buf.getvalue()


def _best(sweep: SweepResult, metric: str, maximize: bool):
    row = sweep.best(metric, maximize)
    if row is None:
        return None
    return {"value": row.mean[metric], "features": row.k}


def summarize(sweeps: Sequence[SweepResult], has_ci: bool) -> dict:
    """Best row per algorithm: max Pearson, min RMSE, min RMSE* with feature counts."""
    out: dict = {"algorithms": {}}
    for s in sweeps:
        entry = {"max_pearson": _best(s, "pearson", True),
                 "min_rmse": _best(s, "rmse", False)}
        entry["min_rmse_star"] = _best(s, "rmse_star", False) if has_ci else None
        out["algorithms"][s.algorithm] = entry
    out["rmse_star"] = ("per-sample CI95 column" if has_ci else
                        "not attempted: dataset carries no CI data (RMSE* equals RMSE at epsilon 0)")
    return out


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def emit_report(out_dir: str | Path, sweeps: Sequence[SweepResult], manifest: dict,
                has_ci: bool, fisher_n: int = 160,
                selectors: Sequence[str] = ("per-algorithm", "global")) -> list[Path]:
    """Write manifest, one CSV per sweep, comparison CSVs and ``summary.json``."""
    if not sweeps:
        raise ValueError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str) -> None:
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)

    for s in sweeps:
        put(f"sweep_{s.algorithm}.csv", sweep_to_csv(s))
    for sel in selectors:
        tables = compare_significance(sweeps, sel, fisher_n)
        put(f"comparison_{sel}.csv", comparison_to_csv(tables))
    summary = summarize(sweeps, has_ci)
    summary["fisher_n"] = fisher_n
    summary["fisher_caveat"] = FISHER_CAVEAT
    if manifest.get("mos_source"):
        summary["mos_source"] = manifest["mos_source"]
    put("summary.json", _dump_json(summary))
    manifest = dict(manifest)
    manifest.setdefault("tool_version", __version__)
    manifest["outputs"] = sorted(p.name for p in written)
    put("manifest.json", _dump_json(manifest))
    return written


def verify_manifest(manifest_path: str | Path) -> tuple[bool, str]:
    """Recompute the input hash recorded in a manifest."""
    m = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    inp = m.get("input", {})
    if inp.get("kind") == "synthetic":
        return True, "synthetic input: regenerated from seed, nothing to hash"
    path, want = inp.get("path"), inp.get("sha256")
    if not path or not want:
        return False, "manifest records no input hash"
    if not Path(path).exists():
        return False, f"input file {path} is missing"
    got = sha256_file(path)
    if got != want:
        return False, f"input hash mismatch: manifest {want[:12]}..., file {got[:12]}..."
    return True, "input hash verified"
