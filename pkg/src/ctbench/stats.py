"""Benchmark statistics: median/IQR rollups, Pearson r, Mann-Whitney U.

The aggregation convention: within one scan, structure scores of a category
are averaged; the median and quartiles are then taken across scans. Absent
structures enter as their empty-policy scores instead of being dropped, so a
method that loses an organ is penalized rather than excused.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

PIXEL_CATEGORY = "Pixel"  # category tag for whole-volume psnr/ssim rows

METRIC_NAMES = ("psnr", "ssim", "dsc", "nsd", "cldice")


@dataclass(frozen=True)
class MetricRecord:
    """One measurement: a metric value for a structure of one reconstruction."""

    scan_id: str
    method_id: str
    views: int
    structure: str
    category: str
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in METRIC_NAMES:
            raise ParameterError(f"unknown metric {self.metric!r}")
        v = float(self.value)
        if not (math.isfinite(v) or (self.metric == "psnr" and v == math.inf)):
            raise ParameterError(f"non-finite value {v} for metric {self.metric}")


@dataclass(frozen=True)
class CategorySummary:
    """Median and quartiles of one (method, views, category, metric) cell."""

    method_id: str
    views: int
    category: str
    metric: str
    median: float
    q1: float
    q3: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError("summary needs at least one sample")
        if not (self.q1 <= self.median <= self.q3):
            raise ParameterError("quartiles must satisfy q1 <= median <= q3")


def median_iqr(samples) -> tuple[float, float, float]:
    """(median, q1, q3) with linear interpolation between closest ranks."""
    arr = np.asarray(list(samples), dtype=np.float64)
    if arr.size == 0:
        raise ParameterError("median_iqr of empty sample")
    q1, med, q3 = np.quantile(arr, [0.25, 0.5, 0.75], method="linear")
    return float(med), float(q1), float(q3)


def pearson(x, y) -> float:
    """Product-moment correlation coefficient."""
    x = np.asarray(list(x), dtype=np.float64)
    y = np.asarray(list(y), dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ParameterError("pearson needs two equal-length samples of size >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise ParameterError("correlation undefined for zero-variance input")
    return float(np.dot(dx, dy) / math.sqrt(sxx * syy))


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------

EXACT_LIMIT = 12  # exact enumeration when len(a)+len(b) <= this and no ties


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    r_a = ranks[: a.size].sum()
    return float(r_a - a.size * (a.size + 1) / 2.0)


def _exact_two_sided_p(n: int, m: int, u_obs: float) -> float:
    """Null distribution of U by enumerating which pooled positions go to a.

    Tie-free data only: U depends just on the set of rank positions, so each
    n-subset of {0..n+m-1} is one equally likely outcome.
    """
    total = math.comb(n + m, n)
    at_or_below = 0
    at_or_above = 0
    for combo in itertools.combinations(range(n + m), n):
        u = sum(combo) + n - n * (n + 1) / 2.0
        if u <= u_obs + 1e-12:
            at_or_below += 1
        if u >= u_obs - 1e-12:
            at_or_above += 1
    p = 2.0 * min(at_or_below, at_or_above) / total
    return min(1.0, p)


def mann_whitney_u(a, b) -> tuple[float, float]:
    """Rank-sum test; returns (U of the first sample, two-sided p).

    Exact p by enumeration for small tie-free samples, otherwise a normal
    approximation with tie-corrected variance and continuity correction.
    """
    a = np.asarray(list(a), dtype=np.float64)
    b = np.asarray(list(b), dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ParameterError("mann_whitney_u needs two nonempty samples")
    n, m = a.size, b.size
    u = _u_statistic(a, b)

    pooled = np.concatenate([a, b])
    has_ties = np.unique(pooled).size < pooled.size
    if not has_ties and n + m <= EXACT_LIMIT:
        return u, _exact_two_sided_p(n, m, u)

    mu = n * m / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(((counts**3) - counts).sum())
    nm = n + m
    var = n * m / 12.0 * ((nm + 1) - tie_term / (nm * (nm - 1)))
    if var <= 0:
        return u, 1.0  # all observations tied
    z = (abs(u - mu) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    p = math.erfc(z / math.sqrt(2.0))
    return u, min(1.0, p)


# ---------------------------------------------------------------------------
# Category rollups
# ---------------------------------------------------------------------------


def aggregate_category(records, policy: str = "mean") -> list[CategorySummary]:
    """Roll per-structure records up to (method, views, category, metric) cells.

    Within a scan, structure values are combined per ``policy`` (only
    "mean" is defined); medians/IQRs are then taken across scans.
    """
    if policy != "mean":
        raise ParameterError(f"unknown aggregation policy {policy!r}")
    per_scan: dict[tuple, list[float]] = {}
    for rec in records:
        key = (rec.method_id, rec.views, rec.category, rec.metric, rec.scan_id)
        per_scan.setdefault(key, []).append(float(rec.value))

    across: dict[tuple, list[float]] = {}
    for (method, views, category, metric, _scan), vals in per_scan.items():
        across.setdefault((method, views, category, metric), []).append(
            float(np.mean(vals))
        )

    out = []
    for (method, views, category, metric), vals in sorted(across.items()):
        med, q1, q3 = median_iqr(vals)
        out.append(CategorySummary(method, views, category, metric, med, q1, q3, len(vals)))
    return out


def per_scan_category_means(records) -> dict[tuple, float]:
    """(method, views, category, metric, scan) -> mean over structures.

    The sample sets behind aggregate_category; used for significance tests
    between method variants.
    """
    per_scan: dict[tuple, list[float]] = {}
    for rec in records:
        key = (rec.method_id, rec.views, rec.category, rec.metric, rec.scan_id)
        per_scan.setdefault(key, []).append(float(rec.value))
    return {k: float(np.mean(v)) for k, v in per_scan.items()}
