"""Paired t-test, exact/approximate Wilcoxon signed-rank test, Bonferroni correction."""
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as _st

from ..errors import ConfigError

EXACT_LIMIT = 25


@dataclass(frozen=True)
class PairedTestResult:
    test: str
    statistic: float
    p_raw: float
    p_corrected: float
    m: int
    n: int
    degenerate: bool = False

    def to_dict(self):
        return asdict(self)


def bonferroni(p, m):
    if m < 1:
        raise ConfigError("number of comparisons must be >= 1")
    return min(1.0, m * p)


def paired_t(a, b):
    d = np.asarray(a, float) - np.asarray(b, float)
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), float(2 * _st.t.sf(abs(t), n - 1))


def signed_rank_counts(n):
    """Number of sign patterns of ranks 1..n giving each positive-rank sum W+."""
    top = n * (n + 1) // 2
    counts = [0] * (top + 1)
    counts[0] = 1
    for r in range(1, n + 1):
        for s in range(top, r - 1, -1):
            counts[s] += counts[s - r]
    return counts


def _ranks(values):
    return _st.rankdata(values)


def wilcoxon(a, b):
    """Two-sided signed-rank test; zero differences are dropped.

    Returns ``(W+, p, degenerate)``.  Exact null distribution for n <= 25 without
    ties, otherwise the normal approximation with continuity (and tie) correction.
    """
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return math.nan, math.nan, True
    ranks = _ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    ties = len(np.unique(np.abs(d))) != n
    if n <= EXACT_LIMIT and not ties:
        counts = signed_rank_counts(n)
        total = 2 ** n
        w = int(round(w_plus))
        lo = sum(counts[: w + 1])
        hi = sum(counts[w:])
        p = min(1.0, 2 * min(lo, hi) / total)
        return w_plus, p, False
    mu = n * (n + 1) / 4
    _, tcounts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(tcounts ** 3 - tcounts)) / 48
    z = (abs(w_plus - mu) - 0.5) / math.sqrt(var)
    return w_plus, float(min(1.0, 2 * _st.norm.sf(max(z, 0.0)))), False


def stat_tests(a, b, m=1):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError("samples must be equal-length 1D sequences")
    if a.size < 5:
        raise ConfigError("need at least 5 paired samples")
    n = a.size
    t, pt = paired_t(a, b)
    w, pw, degenerate = wilcoxon(a, b)
    return [
        PairedTestResult("paired-t", t, pt, bonferroni(pt, m), m, n),
        PairedTestResult("wilcoxon-signed-rank", w, pw, pw if degenerate else bonferroni(pw, m), m, n, degenerate),
    ]
