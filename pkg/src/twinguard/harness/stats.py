"""Paired bootstrap intervals and exact binomial bounds."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import beta as beta_dist


@dataclass
class BootstrapResult:
    delta: float
    ci: tuple
    significant: bool
    n: int


def bootstrap_ci(a, b, n_resamples=10_000, seed=0, level=0.95):
    """Percentile-method CI of mean(a - b) over paired resamples.

    Significant iff the interval excludes zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    if len(a) == 0:
        raise ValueError("empty samples")
    d = a - b
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(d), size=(n_resamples, len(d)))
    means = d[idx].mean(axis=1)
    q = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [q, 1.0 - q])
    point = float(d.mean())
    # quantile interpolation can land a hair inside a degenerate point estimate
    lo, hi = float(min(lo, point)), float(max(hi, point))
    return BootstrapResult(point, (lo, hi), bool(lo > 0 or hi < 0), len(d))


def clopper_pearson_upper(k, n, alpha=0.05):
    """One-sided (1 - alpha) upper bound on a binomial rate after k events in n trials."""
    if n <= 0:
        return 1.0
    if k < 0 or k > n:
        raise ValueError("need 0 <= k <= n")
    if k == n:
        return 1.0
    if k == 0:
        return float(1.0 - alpha ** (1.0 / n))
    return float(beta_dist.ppf(1.0 - alpha, k + 1, n - k))
