"""Correlation statistics for the CumDivNorm / quality-loss study."""

from __future__ import annotations

import numpy as np

from ..errors import ArgumentError, CorrelationError

# association bands for the absolute coefficient
WEAK_FLOOR = 0.10
MEDIUM_FLOOR = 0.29
STRONG_FLOOR = 0.49


def pearson(x, y) -> float:
    """Product-moment correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ArgumentError("pearson needs two equal-length vectors")
    if len(x) < 2:
        raise ArgumentError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float((dx * dx).sum())
    syy = float((dy * dy).sum())
    if sxx == 0.0 or syy == 0.0:
        raise CorrelationError("zero variance input, correlation undefined")
    return float((dx * dy).sum() / np.sqrt(sxx * syy))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Rank correlation, rs = 1 - 6*sum(d^2)/(n(n^2-1)); ties get average
    ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ArgumentError("spearman needs two equal-length vectors")
    n = len(x)
    if n < 2:
        raise ArgumentError("spearman needs at least 2 points")
    if (x == x[0]).all() or (y == y[0]).all():
        raise CorrelationError("constant input, rank correlation undefined")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    d2 = float(((rx - ry) ** 2).sum())
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))


def association_band(r: float) -> str:
    a = abs(r)
    if a > STRONG_FLOOR:
        return "strong"
    if a > MEDIUM_FLOOR:
        return "medium"
    if a >= WEAK_FLOOR:
        return "weak"
    return "negligible"


def analyze_correlation(points) -> tuple[float, float, str, str]:
    """points: iterable of (cum_div_norm, qloss_ts) pairs pooled across runs.
    Returns (rp, rs, band_rp, band_rs)."""
    pts = list(points)
    if len(pts) < 2:
        raise ArgumentError("correlation needs at least 2 points")
    x = [p[0] for p in pts]
    y = [p[1] for p in pts]
    rp = pearson(x, y)
    rs = spearman(x, y)
    return rp, rs, association_band(rp), association_band(rs)
