"""Wilcoxon signed-rank test with an exact null distribution for small samples."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm, rankdata

from xdssl.errors import InvalidInputError

EXACT_MAX_N = 25
MIN_N = 5


@dataclass(frozen=True)
class PairedTestResult:
    n_effective: int
    statistic: float  # min(W+, W-)
    w_plus: float
    p_value: float
    method: str  # "exact" | "normal_approx" | "degenerate"
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def signed_ranks(a, b) -> np.ndarray:
    """Signed average ranks of the nonzero differences ``a - b``."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    return np.sign(d) * rankdata(np.abs(d))


def exact_upper_tail(ranks: np.ndarray) -> np.ndarray:
    """Null distribution of W+ for the given (possibly tied) ranks.

    Ranks are doubled so average ranks become integers; returns the
    probability mass over doubled sums 0..2*sum(ranks).
    """
    doubled = np.rint(2 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts / 2.0 ** len(doubled)


def wilcoxon_signed_rank(a, b, exact_max_n: int = EXACT_MAX_N) -> PairedTestResult:
    """Two-sided paired test; zero differences are dropped, ties share ranks.

    Uses the exact permutation distribution of W+ when at most
    ``exact_max_n`` nonzero differences remain, otherwise the normal
    approximation with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("paired samples must be 1-D arrays of equal length")
    sr = signed_ranks(a, b)
    n = sr.size
    if n == 0:
        return PairedTestResult(0, 0.0, 0.0, 1.0, "degenerate", True)
    if n < MIN_N:
        raise InvalidInputError(f"need at least {MIN_N} nonzero differences, got {n}")
    ranks = np.abs(sr)
    w_plus = float(ranks[sr > 0].sum())
    w_minus = float(ranks[sr < 0].sum())
    stat = min(w_plus, w_minus)

    if n <= exact_max_n:
        pmf = exact_upper_tail(ranks)
        k = int(round(2 * w_plus))
        lower = pmf[: k + 1].sum()
        upper = pmf[k:].sum()
        p = min(1.0, 2.0 * min(lower, upper))
        return PairedTestResult(n, stat, w_plus, float(p), "exact")

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * norm.sf(max(z, 0.0)))
    return PairedTestResult(n, stat, w_plus, float(p), "normal_approx")
