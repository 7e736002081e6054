"""RBF-kernel maximum mean discrepancy and its permutation threshold."""

import numpy as np


def sq_dists(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    d = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d, 0.0)


def rbf(X, Y, bandwidth):
    return np.exp(-sq_dists(X, Y) / (2.0 * bandwidth ** 2))


def median_bandwidth(X, Y=None, floor=1e-6):
    """Median heuristic: sigma = sqrt(median of pairwise squared distances / 2)."""
    Z = X if Y is None else np.vstack([X, Y])
    d = sq_dists(Z, Z)
    iu = np.triu_indices(len(Z), k=1)
    med = np.median(d[iu]) if len(iu[0]) else 1.0
    return float(max(np.sqrt(0.5 * med), floor))


def mmd2(X, Y, bandwidth=None, estimator="unbiased"):
    """Squared MMD between sample sets X (m, d) and Y (n, d).

    biased:   mean K_XX + mean K_YY - 2 mean K_XY (diagonals kept)
    unbiased: off-diagonal means of K_XX and K_YY, requires m, n >= 2
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    bw = median_bandwidth(X, Y) if bandwidth is None else bandwidth
    Kxx, Kyy, Kxy = rbf(X, X, bw), rbf(Y, Y, bw), rbf(X, Y, bw)
    m, n = len(X), len(Y)
    if estimator == "biased":
        return float(Kxx.mean() + Kyy.mean() - 2.0 * Kxy.mean())
    if estimator != "unbiased":
        raise ValueError(f"unknown estimator {estimator}")
    if m < 2 or n < 2:
        raise ValueError("unbiased MMD needs at least two samples per set")
    sxx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
    syy = (Kyy.sum() - np.trace(Kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * Kxy.mean())


def mmd2_unbiased_grad(X, Y, bandwidth):
    """Unbiased MMD^2 and its gradients w.r.t. X and Y at fixed bandwidth."""
    m, n = len(X), len(Y)
    s2 = bandwidth ** 2
    Kxx, Kyy, Kxy = rbf(X, X, bandwidth), rbf(Y, Y, bandwidth), rbf(X, Y, bandwidth)
    np.fill_diagonal(Kxx, 0.0)
    np.fill_diagonal(Kyy, 0.0)
    cxx, cyy, cxy = 1.0 / (m * (m - 1)), 1.0 / (n * (n - 1)), 2.0 / (m * n)
    val = cxx * Kxx.sum() + cyy * Kyy.sum() - cxy * Kxy.sum()
    # d k(a,b)/da = -k (a - b) / s2
    gX = (-2.0 * cxx / s2) * (Kxx.sum(1)[:, None] * X - Kxx @ X)
    gX += (cxy / s2) * (Kxy.sum(1)[:, None] * X - Kxy @ Y)
    gY = (-2.0 * cyy / s2) * (Kyy.sum(1)[:, None] * Y - Kyy @ Y)
    gY += (cxy / s2) * (Kxy.sum(0)[:, None] * Y - Kxy.T @ X)
    return float(val), gX, gY


class MmdReference:
    """Reference embeddings with the constant reference-reference term precomputed."""

    def __init__(self, Z_ref, bandwidth=None):
        self.Z = np.asarray(Z_ref, dtype=np.float64)
        self.bandwidth = median_bandwidth(self.Z) if bandwidth is None else bandwidth
        n = len(self.Z)
        K = rbf(self.Z, self.Z, self.bandwidth)
        self.syy = (K.sum() - np.trace(K)) / (n * (n - 1))

    def statistic(self, X):
        X = np.atleast_2d(X)
        m = len(X)
        if m < 2:
            raise ValueError("test batch needs at least two embeddings")
        Kxx = rbf(X, X, self.bandwidth)
        sxx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
        return float(sxx + self.syy - 2.0 * rbf(X, self.Z, self.bandwidth).mean())


def permutation_null(Z_ref, n_perm=200, seed=0, test_size=10, bandwidth=None, block=False, guard=0):
    """Null statistics of unbiased MMD^2 between a held-out part of the reference and the rest.

    block=False holds out a random subset (exchangeable samples). block=True holds out a
    contiguous run of `test_size` rows and drops `guard` rows on either side from the
    remainder, which keeps the calibration honest for serially correlated embeddings.
    """
    Z = np.asarray(Z_ref, dtype=np.float64)
    n = len(Z)
    if n < 2 * test_size:
        raise ValueError(f"reference of size {n} is smaller than twice the test batch ({test_size})")
    bw = median_bandwidth(Z) if bandwidth is None else bandwidth
    rng = np.random.default_rng(seed)
    K = rbf(Z, Z, bw)
    stats = np.empty(n_perm)
    for b in range(n_perm):
        if block:
            s = int(rng.integers(0, n - test_size + 1))
            te = np.arange(s, s + test_size)
            keep = np.ones(n, dtype=bool)
            keep[max(0, s - guard):min(n, s + test_size + guard)] = False
            re = np.flatnonzero(keep)
        else:
            perm = rng.permutation(n)
            te, re = perm[:test_size], perm[test_size:]
        m, r = len(te), len(re)
        Kxx = K[np.ix_(te, te)]
        Kyy = K[np.ix_(re, re)]
        sxx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
        syy = (Kyy.sum() - np.trace(Kyy)) / (r * (r - 1))
        stats[b] = sxx + syy - 2.0 * K[np.ix_(te, re)].mean()
    return stats


def permutation_threshold(Z_ref, n_perm=200, alpha=0.05, seed=0, test_size=10, bandwidth=None,
                          block=False, guard=0):
    """(1 - alpha) quantile of the permutation null; alpha = 1 gives the minimum statistic."""
    stats = permutation_null(Z_ref, n_perm, seed, test_size, bandwidth, block, guard)
    return float(np.quantile(stats, 1.0 - alpha))
