"""Small exact-statistics helpers shared by estimation and sensitivity."""

from __future__ import annotations

import math

import numpy as np


def chi2_sf_1df(x: float) -> float:
    """Survival function of chi-squared with 1 degree of freedom."""
    if x < 0:
        raise ValueError("chi-squared statistic must be non-negative")
    return math.erfc(math.sqrt(x / 2.0))


def _binom_logpmf(k: int, n: int, q: float) -> float:
    return (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
            + k * math.log(q) + (n - k) * math.log1p(-q))


def binom_tail_ge(k: int, n: int, q: float) -> float:
    """Exact P(X >= k) for X ~ Binomial(n, q)."""
    if not 0 <= k <= n + 1:
        raise ValueError("k out of range")
    if n < 1:
        raise ValueError("n must be at least 1")
    if k <= 0:
        return 1.0
    if k > n:
        return 0.0
    if q <= 0.0:
        return 0.0
    if q >= 1.0:
        return 1.0
    total = 0.0
    for i in range(n, k - 1, -1):  # ascending term size
        total += math.exp(_binom_logpmf(i, n, q))
    return min(total, 1.0)


def binom_tail_le(k: int, n: int, q: float) -> float:
    """Exact P(X <= k) for X ~ Binomial(n, q)."""
    return binom_tail_ge(n - k, n, 1.0 - q) if 0.0 < q < 1.0 else (
        1.0 if (q <= 0.0 and k >= 0) or (q >= 1.0 and k >= n) else 0.0)


def rank_average(values) -> np.ndarray:
    """Ranks starting at 1, ties averaged."""
    x = np.asarray(values, dtype=float)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation (Pearson correlation of average ranks)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need two sequences of equal length >= 2")
    rx = rank_average(x)
    ry = rank_average(y)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    denom = math.sqrt(float(sx @ sx) * float(sy @ sy))
    if denom == 0:
        return 0.0
    return float(sx @ sy) / denom
