"""Quality dataset representation, CSV ingestion and column ordering."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MOS_COLUMN = "MOS"
CI_COLUMN = "CI95"


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class Sample:
    features: tuple[float, ...]
    mos: float
    ci95: float | None = None


@dataclass(frozen=True)
class QualityDataset:
    """Feature matrix plus MOS target, optionally with per-sample CI half-widths.

    Arrays are copied and marked read-only on construction, so instances can be
    shared between workers.
    """

    column_names: tuple[str, ...]
    X: np.ndarray
    mos: np.ndarray
    ci95: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        mos = np.array(self.mos, dtype=np.float64).reshape(-1)
        if X.ndim != 2:
            raise DatasetError("feature matrix must be 2-D")
        names = tuple(str(c) for c in self.column_names)
        if len(names) != X.shape[1]:
            raise DatasetError(
                f"{len(names)} column names for {X.shape[1]} feature columns")
        if len(set(names)) != len(names):
            raise DatasetError("column names must be unique")
        if X.shape[0] == 0:
            raise DatasetError("empty dataset")
        if mos.shape[0] != X.shape[0]:
            raise DatasetError("MOS length does not match row count")
        if np.any((mos < 1.0) | (mos > 5.0)):
            bad = int(np.flatnonzero((mos < 1.0) | (mos > 5.0))[0])
            raise DatasetError(f"MOS out of [1,5] at row {bad + 1}: {mos[bad]}")
        ci = None
        if self.ci95 is not None:
            ci = np.array(self.ci95, dtype=np.float64).reshape(-1)
            if ci.shape[0] != X.shape[0]:
                raise DatasetError("CI95 length does not match row count")
            if np.any(ci < 0):
                raise DatasetError("CI95 values must be non-negative")
            ci.setflags(write=False)
        X.setflags(write=False)
        mos.setflags(write=False)
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "mos", mos)
        object.__setattr__(self, "ci95", ci)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def has_ci(self) -> bool:
        return self.ci95 is not None

    @property
    def samples(self) -> list[Sample]:
        ci = self.ci95
        return [
            Sample(tuple(float(v) for v in row), float(m),
                   None if ci is None else float(ci[i]))
            for i, (row, m) in enumerate(zip(self.X, self.mos))
        ]

    def take_rows(self, idx) -> "QualityDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return QualityDataset(
            self.column_names, self.X[idx], self.mos[idx],
            None if self.ci95 is None else self.ci95[idx], dict(self.meta))

    def take_columns(self, cols: Sequence[int]) -> "QualityDataset":
        cols = list(cols)
        return QualityDataset(
            tuple(self.column_names[c] for c in cols), self.X[:, cols],
            self.mos, self.ci95, dict(self.meta))


@dataclass(frozen=True)
class FeatureRanking:
    """Importance-sorted feature names (descending, ties by name)."""

    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        entries = tuple((str(n), float(v)) for n, v in self.entries)
        if any(v < 0 or not math.isfinite(v) for _, v in entries):
            raise DatasetError("importances must be finite and non-negative")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_importances(cls, names: Sequence[str], importances) -> "FeatureRanking":
        imp = np.asarray(importances, dtype=np.float64)
        total = imp.sum()
        if total > 0:
            imp = imp / total
        order = sorted(range(len(names)), key=lambda i: (-imp[i], names[i]))
        return cls(tuple((names[i], float(imp[i])) for i in order))

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "importance"])
            for name, v in self.entries:
                w.writerow([name, repr(v)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "FeatureRanking":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or [c.strip() for c in rows[0][:2]] != ["feature", "importance"]:
            raise DatasetError(f"{path}: expected header 'feature,importance'")
        return cls(tuple((r[0], float(r[1])) for r in rows[1:] if r))


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DatasetError(
            f"non-numeric cell {cell!r} at row {row}, column {column!r}") from None
    if not math.isfinite(value):
        raise DatasetError(f"non-finite cell {cell!r} at row {row}, column {column!r}")
    return value


def load_dataset_csv(path: str | Path, columns: Iterable[str] | None = None,
                     ci_column: str = CI_COLUMN) -> QualityDataset:
    """Read a comma-separated quality dataset.

    Every column other than ``MOS`` and the CI column is a feature, in header
    order. ``columns`` restricts the features to an explicit whitelist. Row
    numbers in error messages count data rows from 1 (the header is row 0).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if MOS_COLUMN not in header:
        raise DatasetError(f"{path}: missing {MOS_COLUMN!r} column")
    if len(rows) == 1:
        raise DatasetError("empty dataset")

    feature_idx = [i for i, c in enumerate(header) if c not in (MOS_COLUMN, ci_column)]
    if columns is not None:
        wanted = list(columns)
        unknown = [c for c in wanted if c not in header]
        if unknown:
            raise DatasetError(f"whitelisted columns not in file: {unknown}")
        keep = set(wanted)
        feature_idx = [i for i in feature_idx if header[i] in keep]
    mos_i = header.index(MOS_COLUMN)
    ci_i = header.index(ci_column) if ci_column in header else None

    X = np.empty((len(rows) - 1, len(feature_idx)))
    mos = np.empty(len(rows) - 1)
    ci = np.empty(len(rows) - 1) if ci_i is not None else None
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DatasetError(
                f"row {r} has {len(row)} cells, header has {len(header)}")
        for j, i in enumerate(feature_idx):
            X[r - 1, j] = _parse_float(row[i], r, header[i])
        mos[r - 1] = _parse_float(row[mos_i], r, MOS_COLUMN)
        if ci is not None:
            ci[r - 1] = _parse_float(row[ci_i], r, ci_column)
    names = tuple(header[i] for i in feature_idx)
    return QualityDataset(names, X, mos, ci, {"source": str(path)})


def dataset_to_csv(ds: QualityDataset) -> str:
    """Serialize with shortest round-trip float formatting (deterministic)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(ds.column_names) + [MOS_COLUMN]
    if ds.has_ci:
        header.append(CI_COLUMN)
    w.writerow(header)
    for i in range(ds.n_samples):
        row = [repr(float(v)) for v in ds.X[i]] + [repr(float(ds.mos[i]))]
        if ds.has_ci:
            row.append(repr(float(ds.ci95[i])))
        w.writerow(row)
    return buf.getvalue()


def write_dataset_csv(ds: QualityDataset, path: str | Path) -> None:
    Path(path).write_text(dataset_to_csv(ds), encoding="utf-8")


def reorder_by_ranking(ds: QualityDataset, ranking: FeatureRanking | Sequence[str]) -> QualityDataset:
    """Permute feature columns into ranking order; unranked columns are dropped."""
    names = ranking.names if isinstance(ranking, FeatureRanking) else list(ranking)
    pos = {n: i for i, n in enumerate(ds.column_names)}
    unknown = [n for n in names if n not in pos]
    if unknown:
        raise DatasetError(f"ranking references unknown columns: {unknown}")
    return ds.take_columns([pos[n] for n in names])


def select_top_k(ds: QualityDataset, k: int) -> QualityDataset:
    if not 1 <= k <= ds.n_features:
        raise DatasetError(f"k={k} outside 1..{ds.n_features}")
    return ds.take_columns(range(k))


def shuffle(ds: QualityDataset, seed) -> QualityDataset:
    perm = np.random.default_rng(seed).permutation(ds.n_samples)
    return ds.take_rows(perm)


def detect_diff_scale(ds: QualityDataset) -> str:
    """Classify ``*Diff`` columns as ``percent`` (0..100) or ``fraction`` (0..1).

    Values are never rescaled; the answer is recorded in run manifests.
    """
    cols = [i for i, n in enumerate(ds.column_names) if n.endswith("Diff")]
    if not cols:
        return "none"
    return "percent" if float(np.max(np.abs(ds.X[:, cols]))) > 1.0 else "fraction"
