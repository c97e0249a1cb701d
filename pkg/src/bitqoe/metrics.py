"""ITU-T P.1401 style evaluation statistics.

All functions take 1-D sequences and return plain floats. Correlations on a
constant series raise :class:`UndefinedMetricError` rather than returning NaN.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

# two-tailed 5% critical value of the standard normal
Z_CRIT_05 = 1.959964


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    rmse_star: float
    pearson: float | None
    spearman: float | None
    outlier_ratio: float | None
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SignificanceResult:
    z_stat: float
    p_value: float
    significant_at_05: bool


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    a = np.asarray(actual, dtype=np.float64).reshape(-1)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.size} vs {a.size}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, a


def _ci_array(ci, n: int) -> np.ndarray:
    c = np.asarray(ci, dtype=np.float64).reshape(-1)
    if c.size == 1 and n != 1:
        c = np.full(n, c[0])
    if c.size != n:
        raise ValueError(f"CI length {c.size} does not match {n} samples")
    if np.any(c < 0):
        raise ValueError("confidence intervals must be non-negative")
    return c


def rmse(pred, actual, dof_correction: int = 0) -> float:
    """Root mean square error; ``dof_correction`` d divides by N - d instead of N."""
    p, a = _pair(pred, actual)
    denom = p.size - dof_correction
    if denom <= 0:
        raise ValueError("dof_correction leaves no degrees of freedom")
    return math.sqrt(float(np.sum((p - a) ** 2)) / denom)


def rmse_epsilon(pred, actual, ci95=None, epsilon: float | None = None,
                 dof_correction: int = 0) -> float:
    """Epsilon-insensitive RMSE: errors inside each sample's CI count as zero.

    Either per-sample ``ci95`` half-widths or a scalar ``epsilon`` must be given.
    """
    p, a = _pair(pred, actual)
    if ci95 is None:
        if epsilon is None:
            raise ValueError("rmse_epsilon needs per-sample CI or a global epsilon")
        ci95 = epsilon
    c = _ci_array(ci95, p.size)
    e = np.maximum(0.0, np.abs(p - a) - c)
    denom = p.size - dof_correction
    if denom <= 0:
        raise ValueError("dof_correction leaves no degrees of freedom")
    return math.sqrt(float(np.sum(e * e)) / denom)


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    if x.size < 2:
        raise ValueError("correlation needs at least 2 points")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise UndefinedMetricError("correlation undefined for a constant series")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedMetricError("correlation undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x, y) -> float:
    """Pearson correlation of average (fractional) ranks."""
    x, y = _pair(x, y)
    return pearson(stats.rankdata(x), stats.rankdata(y))


def outlier_ratio(pred, actual, ci95) -> float:
    if ci95 is None:
        raise ValueError("outlier ratio requires per-sample confidence intervals")
    p, a = _pair(pred, actual)
    c = _ci_array(ci95, p.size)
    return float(np.mean(np.abs(p - a) > c))


def ci95_from_scores(scores) -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size < 2:
        raise ValueError("need at least 2 scores for a confidence interval")
    return 1.96 * float(np.std(s, ddof=1)) / math.sqrt(s.size)


def fisher_z_compare(r1: float, r2: float, n1: int, n2: int) -> SignificanceResult:
    """Two-tailed test of a difference between two correlation coefficients."""
    if abs(r1) >= 1 or abs(r2) >= 1:
        raise ValueError("|r| must be < 1 for the Fisher transform")
    if n1 <= 3 or n2 <= 3:
        raise ValueError("sample sizes must exceed 3")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    p = min(1.0, 2.0 * float(stats.norm.sf(abs(z))))
    return SignificanceResult(z, p, p <= 0.05)


def evaluate(pred, actual, ci95=None, epsilon: float = 0.0,
             dof_correction: int = 0) -> EvalReport:
    """Full metric set. Undefined correlations come back as ``None``."""
    p, a = _pair(pred, actual)
    try:
        r = pearson(p, a)
    except UndefinedMetricError:
        r = None
    try:
        rho = spearman(p, a)
    except UndefinedMetricError:
        rho = None
    return EvalReport(
        rmse=rmse(p, a, dof_correction),
        rmse_star=rmse_epsilon(p, a, ci95, epsilon, dof_correction),
        pearson=r,
        spearman=rho,
        outlier_ratio=None if ci95 is None else outlier_ratio(p, a, ci95),
        n=int(p.size),
    )
