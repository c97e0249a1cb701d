"""Cross-validation, LOO feature ranking, feature-count sweeps and significance tables.

Every random stream is derived from ``(master seed, algorithm, k, repeat, fold)``
so results do not depend on how work units are scheduled across processes.
"""

from __future__ import annotations

import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from . import metrics
from .data import FeatureRanking, QualityDataset, select_top_k, shuffle
from .gp import GpParams, evolve
from .mlp import MlpParams, train_adadelta
from .trees import EnsembleParams, fit_bagging, fit_random_forest

log = logging.getLogger(__name__)

METRICS = ("pearson", "spearman", "rmse", "rmse_star", "outlier_ratio")
ALGORITHMS = ("rf", "bg", "mlp", "gp")
_ALGO_CODE = {"rf": 1, "bg": 2, "mlp": 3, "gp": 4, "rank": 5}


class CvError(RuntimeError):
    pass


def derive_seed(*key: int) -> int:
    """Stable 32-bit seed from an integer key path."""
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


@dataclass(frozen=True)
class CvScheme:
    kind: str = "stratified_kfold"
    k: int = 10
    n_bins: int = 5
    repeats: int = 10
    seed: int = 0
    pooling: str = "pooled"
    dof_correction: int = 0

    def __post_init__(self):
        if self.kind not in ("stratified_kfold", "loo"):
            raise ValueError(f"unknown CV kind {self.kind!r}")
        if self.kind == "stratified_kfold" and self.k < 2:
            raise ValueError("k must be >= 2")
        if self.repeats < 1 or self.n_bins < 1:
            raise ValueError("repeats and n_bins must be >= 1")
        if self.pooling not in ("pooled", "perfold"):
            raise ValueError(f"unknown pooling mode {self.pooling!r}")


def default_scheme(algorithm: str, seed: int = 0, repeats: int = 10) -> CvScheme:
    k = 10 if algorithm in ("rf", "bg") else 4
    return CvScheme(k=k, repeats=repeats, seed=seed)


def default_params(algorithm: str):
    if algorithm == "rf":
        return EnsembleParams.random_forest()
    if algorithm == "bg":
        return EnsembleParams.bagging()
    if algorithm == "mlp":
        return MlpParams()
    if algorithm == "gp":
        return GpParams()
    raise ValueError(f"unknown algorithm {algorithm!r}")


def fit_model(algorithm: str, ds: QualityDataset, params, seed: int):
    """Train one model of the given family; the returned object has ``predict``."""
    params = replace(params, seed=int(seed))
    if algorithm == "rf":
        return fit_random_forest(ds, params)
    if algorithm == "bg":
        return fit_bagging(ds, params)
    if algorithm == "mlp":
        return train_adadelta(ds, params)
    if algorithm == "gp":
        return evolve(ds, params)
    raise ValueError(f"unknown algorithm {algorithm!r}")


# --- splitting ----------------------------------------------------------------

def stratified_kfold(ds: QualityDataset | np.ndarray, k: int, n_bins: int = 5,
                     seed=0) -> list[np.ndarray]:
    """Equal-frequency MOS bins, each shuffled and dealt round-robin over folds.

    The dealing position carries over between bins, so fold sizes differ by at
    most one overall as well as within every bin.
    """
    mos = ds.mos if isinstance(ds, QualityDataset) else np.asarray(ds, dtype=np.float64)
    n = mos.size
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in 1..{n}")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    rng = np.random.default_rng(seed)
    order = np.argsort(mos, kind="stable")
    folds: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for b in np.array_split(order, min(n_bins, n)):
        for i in rng.permutation(b):
            folds[pos % k].append(int(i))
            pos += 1
    return [np.array(sorted(f), dtype=np.intp) for f in folds]


def loo_folds(n: int) -> list[np.ndarray]:
    return [np.array([i], dtype=np.intp) for i in range(n)]


# --- cross-validation ---------------------------------------------------------

def _summary(reports: Sequence[metrics.EvalReport]) -> tuple[dict, dict]:
    mean, std = {}, {}
    for m in METRICS:
        vals = [getattr(r, m) for r in reports if getattr(r, m) is not None]
        if vals:
            mean[m] = float(np.mean(vals))
            std[m] = float(np.std(vals))
        else:
            mean[m] = std[m] = None
    return mean, std


def _average_reports(reports: Sequence[metrics.EvalReport]) -> metrics.EvalReport:
    mean, _ = _summary(reports)
    return metrics.EvalReport(mean["rmse"], mean["rmse_star"], mean["pearson"],
                              mean["spearman"], mean["outlier_ratio"],
                              int(sum(r.n for r in reports)))


@dataclass
class CvResult:
    mean: dict
    std: dict
    repeats: list[metrics.EvalReport]
    folds: list[list[metrics.EvalReport]] = field(default_factory=list)

    @property
    def pearson_undefined(self) -> bool:
        return self.mean["pearson"] is None


def _evaluate(pred, ds: QualityDataset, scheme: CvScheme) -> metrics.EvalReport:
    return metrics.evaluate(pred, ds.mos, ds.ci95, 0.0, scheme.dof_correction)


def cv_repeat(ds: QualityDataset, model_factory: Callable, scheme: CvScheme,
              repeat: int, key: Sequence[int] = ()) -> tuple[metrics.EvalReport, list]:
    """One repeat: shuffle, split, train on K-1 folds, predict the held-out fold."""
    base = [scheme.seed, *key, repeat]
    data = shuffle(ds, derive_seed(*base, 0))
    if scheme.kind == "loo":
        folds = loo_folds(data.n_samples)
    else:
        folds = stratified_kfold(data, scheme.k, scheme.n_bins, derive_seed(*base, 1))
    pred = np.full(data.n_samples, np.nan)
    fold_reports = []
    all_idx = np.arange(data.n_samples)
    for f, test in enumerate(folds):
        train = np.setdiff1d(all_idx, test, assume_unique=True)
        try:
            model = model_factory(data.take_rows(train), derive_seed(*base, 2, f))
            pred[test] = model.predict(data.X[test])
        except Exception as exc:
            raise CvError(f"repeat {repeat}, fold {f}: {exc}") from exc
        if scheme.pooling == "perfold" and test.size >= 2:
            fold_reports.append(_evaluate(pred[test], data.take_rows(test), scheme))
    if scheme.pooling == "perfold" and fold_reports:
        report = _average_reports(fold_reports)
    else:
        report = _evaluate(pred, data, scheme)
    return report, fold_reports


def run_cv(ds: QualityDataset, model_factory: Callable, scheme: CvScheme,
           key: Sequence[int] = ()) -> CvResult:
    """Repeated CV; metrics per repeat (pooled or per-fold), then mean/std over repeats.

    ``model_factory(train_ds, seed)`` must return an object with ``predict(X)``.
    A correlation that is undefined for every repeat (constant predictions)
    comes back as ``None``.
    """
    reports, folds = [], []
    for r in range(scheme.repeats):
        rep, fr = cv_repeat(ds, model_factory, scheme, r, key)
        reports.append(rep)
        folds.append(fr)
    mean, std = _summary(reports)
    return CvResult(mean, std, reports, folds)


# --- feature ranking ----------------------------------------------------------

def _loo_importance(ds: QualityDataset, params: EnsembleParams, i: int) -> np.ndarray:
    keep = np.delete(np.arange(ds.n_samples), i)
    model = fit_random_forest(ds.take_rows(keep),
                              replace(params, seed=derive_seed(params.seed, _ALGO_CODE["rank"], i)))
    return model.importances


def rank_features_loo(ds: QualityDataset, rf_params: EnsembleParams | None = None,
                      workers: int = 1) -> FeatureRanking:
    """Average Random-Forest importances over the N leave-one-out models."""
    if ds.n_samples < 2:
        raise ValueError("LOO ranking needs at least 2 samples")
    params = rf_params or EnsembleParams.random_forest()
    units = list(range(ds.n_samples))
    imps = _map(_loo_importance_unit, [(ds, params, i) for i in units], workers)
    total = np.sum(imps, axis=0)
    return FeatureRanking.from_importances(list(ds.column_names), total / len(units))


def _loo_importance_unit(args):
    return _loo_importance(*args)


# --- sweep --------------------------------------------------------------------

@dataclass
class SweepRow:
    k: int
    mean: dict
    std: dict
    n_repeats: int
    undefined_pearson: int = 0


@dataclass
class SweepResult:
    algorithm: str
    rows: list[SweepRow]
    config: dict = field(default_factory=dict)

    def best(self, metric: str, maximize: bool) -> SweepRow | None:
        rows = [r for r in self.rows if r.mean.get(metric) is not None]
        if not rows:
            return None
        sign = -1.0 if maximize else 1.0
        return min(rows, key=lambda r: (sign * r.mean[metric], r.k))


class _Factory:
    """Picklable model factory bound to an algorithm and its parameters."""

    def __init__(self, algorithm: str, params):
        self.algorithm = algorithm
        self.params = params

    def __call__(self, ds: QualityDataset, seed: int):
        return fit_model(self.algorithm, ds, self.params, seed)


def _sweep_unit(args):
    ds, algorithm, params, scheme, k, r = args
    sub = select_top_k(ds, k)
    rep, _ = cv_repeat(sub, _Factory(algorithm, params), scheme, r,
                       key=(_ALGO_CODE[algorithm], k))
    return k, r, rep


def _map(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(fn, items, chunksize=1))


def feature_sweep(ds_ordered: QualityDataset, algorithm: str, scheme: CvScheme | None = None,
                  k_max: int | None = None, params=None, workers: int = 1,
                  progress: Callable[[int, int], None] | None = None) -> SweepResult:
    """Run CV on the top-1, top-2, ... top-``k_max`` feature prefixes.

    The dataset must already be ordered by importance.
    """
    scheme = scheme or default_scheme(algorithm)
    params = params if params is not None else default_params(algorithm)
    k_max = ds_ordered.n_features if k_max is None else k_max
    if not 1 <= k_max <= ds_ordered.n_features:
        raise ValueError(f"k_max={k_max} outside 1..{ds_ordered.n_features}")
    units = [(ds_ordered, algorithm, params, scheme, k, r)
             for k in range(1, k_max + 1) for r in range(scheme.repeats)]
    results = _map(_sweep_unit, units, workers)
    by_k: dict[int, list] = {}
    for k, r, rep in sorted(results, key=lambda t: (t[0], t[1])):
        by_k.setdefault(k, []).append(rep)
    rows = []
    for k in range(1, k_max + 1):
        reps = by_k[k]
        mean, std = _summary(reps)
        rows.append(SweepRow(k, mean, std, len(reps),
                             sum(1 for rep in reps if rep.pearson is None)))
    config = {"algorithm": algorithm, "k_max": k_max, "scheme": asdict(scheme),
              "params": _params_dict(params)}
    return SweepResult(algorithm, rows, config)


def _params_dict(params) -> dict[str, Any]:
    d = asdict(params)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# --- significance -------------------------------------------------------------

@dataclass
class ComparisonRow:
    model_id: str
    pearson: float | None
    result: metrics.SignificanceResult | None


@dataclass
class ComparisonTable:
    baseline_id: str
    baseline_pearson: float
    n: int
    rows: list[ComparisonRow]


def model_id(algorithm: str, k: int) -> str:
    return f"{algorithm}:k{k}"


def _compare_rows(baseline: tuple[str, float], candidates, n: int) -> ComparisonTable:
    bid, br = baseline
    rows = []
    for mid, r in candidates:
        if mid == bid:
            continue
        res = None
        if r is not None and abs(r) < 1 and abs(br) < 1:
            res = metrics.fisher_z_compare(r, br, n, n)
        rows.append(ComparisonRow(mid, r, res))
    return ComparisonTable(bid, br, n, rows)


def compare_significance(sweeps: Sequence[SweepResult], selector: str = "per-algorithm",
                         n: int = 160) -> list[ComparisonTable]:
    """Fisher-z test of every model's Pearson against a best-Pearson baseline.

    ``selector`` is ``per-algorithm`` (one table per sweep) or ``global`` (one
    table against the overall best model).
    """
    if n < 4:
        raise ValueError("sample size must be >= 4")
    if selector not in ("per-algorithm", "global"):
        raise ValueError(f"unknown selector {selector!r}")
    groups = [list(sweeps)] if selector == "global" else [[s] for s in sweeps]
    tables = []
    for group in groups:
        candidates = [(model_id(s.algorithm, row.k), row.mean["pearson"])
                      for s in group for row in s.rows]
        defined = [(mid, r) for mid, r in candidates if r is not None]
        if not defined:
            continue
        # best Pearson; ties go to the first listed (fewest features)
        best = max(defined, key=lambda t: t[1])
        tables.append(_compare_rows(best, candidates, n))
    return tables
