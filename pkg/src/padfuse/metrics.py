"""Pose-error metric and paired significance test.

ADD-S is approximated on sampled surface points: the mean over model points
(posed by the estimate) of the nearest-neighbor distance to the same point
set posed by the ground truth.  The approximation error is bounded by the
surface sampling density, so comparisons should use one fixed point set.

The Wilcoxon signed-rank test uses the zero-exclusion convention, average
ranks for ties, an exact tail computed by enumerating all sign assignments
(dynamic programming over the rank-sum distribution) for n < 20, and the
normal approximation with continuity and tie corrections for n >= 20.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .liegroup import Pose, transform_points
from .sdf import EmptyModel, ObjectModel

EXACT_LIMIT = 20


class TooFewSamples(ValueError):
    """Wilcoxon test needs at least 6 pairs."""


def add_s(est: Pose, truth: Pose, model: ObjectModel) -> float:
    """Mean nearest-surface distance of the estimated-pose model (m)."""
    pts = model.surface_points
    if pts.shape[0] < 1:
        raise EmptyModel("object model has no surface points")
    a = transform_points(est, pts)
    b = transform_points(truth, pts)
    d, _ = cKDTree(b).query(a, k=1)
    return float(d.mean())


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float       # W+: rank sum of positive differences
    p_value: float         # two-sided
    n_effective: int       # pairs remaining after zero exclusion
    all_zero: bool = False # every difference was zero: test undefined
    method: str = "exact"  # "exact" | "normal"


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided paired test of a vs b; see module docstring for conventions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be equal-length 1-D samples")
    if a.size < 6:
        raise TooFewSamples(f"need at least 6 pairs, got {a.size}")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return WilcoxonResult(statistic=0.0, p_value=float("nan"),
                              n_effective=0, all_zero=True)
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n < EXACT_LIMIT:
        p = _exact_two_sided(ranks, w_plus)
        method = "exact"
    else:
        p = _normal_two_sided(ranks, w_plus, n)
        method = "normal"
    return WilcoxonResult(statistic=w_plus, p_value=p, n_effective=n,
                          method=method)


def _exact_two_sided(ranks: np.ndarray, w_plus: float) -> float:
    # average ranks are multiples of 1/2; doubling makes integer sums
    r2 = np.round(2.0 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in r2:
        counts[r:] += counts[:total + 1 - r]
    denom = counts.sum()  # 2^n
    t2 = int(round(2.0 * w_plus))
    tail_ge = counts[t2:].sum() / denom
    tail_le = counts[:t2 + 1].sum() / denom
    return float(min(1.0, 2.0 * min(tail_ge, tail_le)))


def _normal_two_sided(ranks: np.ndarray, w_plus: float, n: int) -> float:
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= (tie_counts ** 3 - tie_counts).sum() / 48.0
    if var <= 0:
        return 1.0
    diff = w_plus - mu
    # continuity correction shrinks the deviation by one half step
    z = (diff - 0.5 * np.sign(diff)) / np.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))
