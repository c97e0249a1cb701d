"""CART regression trees, Random Forest and Bagging ensembles.

Tree growth runs in a numba kernel. All randomness (row sampling, per-node
feature order) is drawn in numpy beforehand, so a fitted model depends only on
the data, the parameters and the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from .data import QualityDataset

FOREST_FORMAT = "bitqoe.forest"
FOREST_FORMAT_VERSION = 1

# relative tolerance under which two split gains count as tied
_GAIN_RTOL = 1e-9


@dataclass(frozen=True)
class TreeParams:
    max_depth: int | None = None
    min_samples_split: int = 2
    feature_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be positive or None")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if not 0.0 < self.feature_fraction <= 1.0:
            raise ValueError("feature_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class EnsembleParams:
    n_trees: int = 166
    feature_fraction: float = 0.4
    sample_fraction: float = 0.8
    bootstrap: bool = False
    seed: int = 0
    max_depth: int | None = None
    min_samples_split: int = 2

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be positive")
        if not 0.0 < self.feature_fraction <= 1.0:
            raise ValueError("feature_fraction must lie in (0, 1]")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must lie in (0, 1]")

    @classmethod
    def random_forest(cls, **kw) -> "EnsembleParams":
        return cls(**{"n_trees": 166, "feature_fraction": 0.4,
                      "sample_fraction": 0.8, "bootstrap": False, **kw})

    @classmethod
    def bagging(cls, **kw) -> "EnsembleParams":
        return cls(**{"n_trees": 166, "feature_fraction": 1.0,
                      "sample_fraction": 0.4, "bootstrap": True, **kw})


@numba.njit(cache=True)
def _grow(X, y, keys, n_try, min_split, max_depth):
    n, n_feat = X.shape
    max_nodes = 2 * n - 1
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes)
    count = np.zeros(max_nodes, dtype=np.int64)
    importance = np.zeros(n_feat)

    idx = np.arange(n)
    stack = np.zeros((max_nodes, 4), dtype=np.int64)  # node, start, end, depth
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    xs = np.empty(n)
    ys = np.empty(n)

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        m = end - start

        s = 0.0
        lo = np.inf
        hi = -np.inf
        for i in range(start, end):
            v = y[idx[i]]
            s += v
            if v < lo:
                lo = v
            if v > hi:
                hi = v
        value[node] = s / m
        count[node] = m
        if m < min_split or lo == hi or (max_depth >= 0 and depth >= max_depth):
            continue

        parent_term = s * s / m
        sse = 0.0
        for i in range(start, end):
            d = y[idx[i]] - value[node]
            sse += d * d
        tol = _GAIN_RTOL * sse

        order = np.argsort(keys[node])
        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        tried = 0
        for oi in range(n_feat):
            if tried >= n_try and best_f >= 0:
                break
            f = order[oi]
            tried += 1
            for i in range(m):
                xs[i] = X[idx[start + i], f]
            srt = np.argsort(xs[:m], kind="mergesort")
            for i in range(m):
                ys[i] = y[idx[start + srt[i]]]
            sl = 0.0
            for i in range(m - 1):
                sl += ys[i]
                a = xs[srt[i]]
                b = xs[srt[i + 1]]
                if a >= b:
                    continue
                nl = i + 1
                sr = s - sl
                gain = sl * sl / nl + sr * sr / (m - nl) - parent_term
                thr = 0.5 * (a + b)
                if thr >= b:
                    thr = a
                better = False
                if best_f < 0 or gain > best_gain + tol:
                    better = True
                elif gain >= best_gain - tol:
                    if f < best_f or (f == best_f and thr < best_thr):
                        better = True
                if better:
                    best_gain = gain
                    best_f = f
                    best_thr = thr
        if best_f < 0:
            continue

        # partition idx[start:end] so that x <= thr comes first
        i = start
        j = end - 1
        while i <= j:
            if X[idx[i], best_f] <= best_thr:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        if i == start or i == end:
            continue
        feature[node] = best_f
        threshold[node] = best_thr
        importance[best_f] += max(best_gain, 0.0)
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        stack[top, 0] = rc
        stack[top, 1] = i
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = lc
        stack[top, 1] = start
        stack[top, 2] = i
        stack[top, 3] = depth + 1
        top += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes], count[:n_nodes], importance)


@numba.njit(cache=True)
def _route(feature, threshold, left, right, value, X):
    out = np.empty(X.shape[0])
    for r in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Flattened binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    n_features: int

    @property
    def node_count(self) -> int:
        return int(self.feature.size)

    def predict(self, X) -> np.ndarray:
        X = _as_matrix(X, self.n_features)
        return _route(self.feature, self.threshold, self.left, self.right,
                      self.value, X)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, n_features: int) -> "RegressionTree":
        return cls(np.asarray(d["feature"], dtype=np.int64),
                   np.asarray(d["threshold"], dtype=np.float64),
                   np.asarray(d["left"], dtype=np.int64),
                   np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=np.float64),
                   np.asarray(d["n_samples"], dtype=np.int64),
                   n_features)


def _as_matrix(X, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return np.ascontiguousarray(X)


def _n_try(fraction: float, n_features: int) -> int:
    return max(1, min(n_features, math.ceil(fraction * n_features - 1e-12)))


def _grow_tree(X, y, n_try, min_split, max_depth, rng, columns=None):
    """Grow one tree; ``columns`` maps local feature indices to global ones."""
    n, f = X.shape
    keys = rng.random((max(2 * n - 1, 1), f))
    md = -1 if max_depth is None else int(max_depth)
    feat, thr, lft, rgt, val, cnt, imp = _grow(
        np.ascontiguousarray(X), np.ascontiguousarray(y), keys,
        n_try, min_split, md)
    if columns is not None:
        feat = np.where(feat >= 0, columns[np.maximum(feat, 0)], -1)
    return (feat, thr, lft, rgt, val, cnt), imp


def fit_cart(ds: QualityDataset, params: TreeParams = TreeParams()) -> RegressionTree:
    """Greedy variance-reduction tree with a random per-node feature subset."""
    rng = np.random.default_rng(params.seed)
    n_try = _n_try(params.feature_fraction, ds.n_features)
    arrays, _ = _grow_tree(ds.X, ds.mos, n_try, params.min_samples_split,
                           params.max_depth, rng)
    return RegressionTree(*arrays, ds.n_features)


def predict_tree(tree: RegressionTree, features) -> np.ndarray | float:
    x = np.asarray(features, dtype=np.float64)
    out = tree.predict(x)
    return float(out[0]) if x.ndim == 1 else out


@dataclass(frozen=True, eq=False)
class ForestModel:
    kind: str
    trees: tuple[RegressionTree, ...]
    params: EnsembleParams
    feature_count: int
    importances: np.ndarray
    feature_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        X = _as_matrix(X, self.feature_count)
        acc = np.zeros(X.shape[0])
        for t in self.trees:
            acc += _route(t.feature, t.threshold, t.left, t.right, t.value, X)
        return acc / len(self.trees)

    def member_predictions(self, X) -> np.ndarray:
        X = _as_matrix(X, self.feature_count)
        return np.array([t.predict(X) for t in self.trees])

    def to_json(self) -> str:
        doc = {
            "format": FOREST_FORMAT,
            "version": FOREST_FORMAT_VERSION,
            "kind": self.kind,
            "params": asdict(self.params),
            "feature_count": self.feature_count,
            "feature_names": list(self.feature_names),
            "importances": self.importances.tolist(),
            "meta": self.meta,
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        doc = json.loads(text)
        if doc.get("format") != FOREST_FORMAT:
            raise ValueError("not a serialized forest model")
        if doc.get("version") != FOREST_FORMAT_VERSION:
            raise ValueError(f"unsupported forest format version {doc.get('version')}")
        fc = int(doc["feature_count"])
        return cls(doc["kind"],
                   tuple(RegressionTree.from_dict(t, fc) for t in doc["trees"]),
                   EnsembleParams(**doc["params"]), fc,
                   np.asarray(doc["importances"], dtype=np.float64),
                   tuple(doc["feature_names"]), doc.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _fit_ensemble(ds: QualityDataset, params: EnsembleParams, kind: str) -> ForestModel:
    if ds.n_samples < 1:
        raise ValueError("empty dataset")
    X, y = ds.X, ds.mos
    n, n_feat = X.shape
    n_rows = max(1, int(round(params.sample_fraction * n)))
    if not params.bootstrap:
        n_rows = min(n_rows, n)
    importance = np.zeros(n_feat)
    trees = []
    for t in range(params.n_trees):
        rng = np.random.default_rng([params.seed, t])
        if params.bootstrap:
            rows = rng.integers(0, n, n_rows)
        elif n_rows == n:
            rows = np.arange(n)
        else:
            rows = np.sort(rng.choice(n, n_rows, replace=False))
        if kind == "rf":
            n_try = _n_try(params.feature_fraction, n_feat)
            arrays, imp = _grow_tree(X[rows], y[rows], n_try,
                                     params.min_samples_split,
                                     params.max_depth, rng)
        else:
            # bagging: the feature fraction picks one column subset per tree
            n_sub = _n_try(params.feature_fraction, n_feat)
            cols = np.arange(n_feat) if n_sub == n_feat else np.sort(
                rng.choice(n_feat, n_sub, replace=False))
            arrays, local = _grow_tree(X[rows][:, cols], y[rows], n_sub,
                                       params.min_samples_split,
                                       params.max_depth, rng, cols)
            imp = np.zeros(n_feat)
            imp[cols] = local
        importance += imp / n_rows
        trees.append(RegressionTree(*arrays, n_feat))
    total = importance.sum()
    if total > 0:
        importance = importance / total
    return ForestModel(kind, tuple(trees), params, n_feat, importance,
                       ds.column_names)


def fit_random_forest(ds: QualityDataset,
                      params: EnsembleParams | None = None) -> ForestModel:
    """Random Forest: per-node feature subsampling, rows drawn without
    replacement unless ``params.bootstrap`` is set."""
    return _fit_ensemble(ds, params or EnsembleParams.random_forest(), "rf")


def fit_bagging(ds: QualityDataset, params: EnsembleParams | None = None) -> ForestModel:
    """Bagged trees: every split sees all of the tree's features."""
    return _fit_ensemble(ds, params or EnsembleParams.bagging(), "bg")


def predict_ensemble(model: ForestModel, features) -> np.ndarray | float:
    x = np.asarray(features, dtype=np.float64)
    out = model.predict(x)
    return float(out[0]) if x.ndim == 1 else out


def feature_importance(model: ForestModel) -> np.ndarray:
    return model.importances.copy()


def load_forest(path: str | Path) -> ForestModel:
    return ForestModel.from_json(Path(path).read_text(encoding="utf-8"))


__all__ = [
    "TreeParams", "EnsembleParams", "RegressionTree", "ForestModel",
    "fit_cart", "predict_tree", "fit_random_forest", "fit_bagging",
    "predict_ensemble", "feature_importance", "load_forest",
]
