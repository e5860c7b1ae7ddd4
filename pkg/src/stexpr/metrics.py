"""Evaluation metrics, clustering and the signed-rank test."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.stats import norm, rankdata

from .errors import ConfigError, DegenerateError, DimensionError

VAR_EPS = 1e-8


def pcc(y, y_hat) -> float:
    """Pearson correlation of two vectors (population moments)."""
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise DimensionError("pcc: vectors differ in length")
    if y.var() <= VAR_EPS or y_hat.var() <= VAR_EPS:
        raise DegenerateError("pcc: constant input vector")
    a, b = y - y.mean(), y_hat - y_hat.mean()
    return float((a @ b) / math.sqrt((a @ a) * (b @ b)))


def per_gene_pcc(Y, Y_hat) -> np.ndarray:
    """Column-wise Pearson r; NaN marks genes with a (near-)constant side."""
    Y, Y_hat = np.asarray(Y, dtype=np.float64), np.asarray(Y_hat, dtype=np.float64)
    if Y.shape != Y_hat.shape:
        raise DimensionError(f"per_gene_pcc: {Y.shape} vs {Y_hat.shape}")
    out = np.full(Y.shape[1], np.nan)
    for g in range(Y.shape[1]):
        try:
            out[g] = pcc(Y[:, g], Y_hat[:, g])
        except DegenerateError:
            pass
    return out


def pcc_mean(Y, Y_hat) -> tuple[float, int]:
    """Mean per-gene PCC over non-degenerate genes, and the skipped count.

    The mean is NaN when every gene is skipped.
    """
    r = per_gene_pcc(Y, Y_hat)
    ok = ~np.isnan(r)
    return (float(r[ok].mean()) if ok.any() else float("nan")), int((~ok).sum())


def rmse(Y, Y_hat) -> float:
    Y, Y_hat = np.asarray(Y, dtype=np.float64), np.asarray(Y_hat, dtype=np.float64)
    if Y.shape != Y_hat.shape:
        raise DimensionError(f"rmse: {Y.shape} vs {Y_hat.shape}")
    return float(np.sqrt(np.mean((Y - Y_hat) ** 2)))


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index from the contingency table, in exact arithmetic."""
    a, b = list(labels_a), list(labels_b)
    if len(a) != len(b):
        raise DimensionError("ari: label vectors differ in length")
    if len(a) < 2:
        raise DegenerateError("ari: need at least two samples")
    pairs = sum(math.comb(c, 2) for c in Counter(zip(a, b)).values())
    sa = sum(math.comb(c, 2) for c in Counter(a).values())
    sb = sum(math.comb(c, 2) for c in Counter(b).values())
    expected = Fraction(sa * sb, math.comb(len(a), 2))
    denom = Fraction(sa + sb, 2) - expected
    if denom == 0:
        raise DegenerateError("ari: both partitions are trivial")
    return float((pairs - expected) / denom)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int


def _plus_plus(X, k, rng):
    centroids = [X[rng.integers(len(X))]]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(len(X)) if total <= 0 else rng.choice(len(X), p=d2 / total)
        centroids.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centroids)


def kmeans(X, k, seed=0, max_iter=100, tol=1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if k < 1 or k > len(X):
        raise ConfigError(f"kmeans: k={k} with {len(X)} points")
    rng = np.random.default_rng(seed)
    C = _plus_plus(X, k, rng)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        new = C.copy()
        for j in range(k):
            members = X[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.sqrt(((new - C) ** 2).sum(axis=1)).max()
        C = new
        if shift < tol:
            break
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return KMeansResult(labels, C, float(d2[np.arange(len(X)), labels].sum()), it)


def kmeans_cluster(Y_hat, k, seed=0):
    return kmeans(Y_hat, k, seed).labels


def _signed_rank_counts(doubled_ranks):
    """Number of sign patterns reaching each doubled positive-rank sum."""
    counts = np.zeros(int(sum(doubled_ranks)) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(deltas, exact_max_n=25) -> float:
    """Two-sided p-value of the Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped and tied magnitudes share averaged ranks.
    Up to ``exact_max_n`` nonzero differences the null distribution is
    computed exactly; above that a tie-corrected normal approximation with
    continuity correction is used.
    """
    x = np.asarray(deltas, dtype=np.float64).ravel()
    x = x[x != 0]
    if x.size == 0:
        raise DegenerateError("wilcoxon: all differences are zero")
    if x.size < 5:
        raise DegenerateError(f"wilcoxon: need at least 5 nonzero differences, got {x.size}")
    ranks = rankdata(np.abs(x))
    w = ranks[x > 0].sum()
    n = x.size
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _signed_rank_counts(doubled)
        w2 = int(round(2 * w))
        total = 2**n
        low = int(counts[: w2 + 1].sum())
        high = int(counts[w2:].sum())
        return min(1.0, 2 * min(low, high) / total)
    mean = n * (n + 1) / 4
    _, ties = np.unique(np.abs(x), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - (ties**3 - ties).sum() / 48
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2 * norm.sf(z)))
