"""Clustering distance over embeddings.

The distance used for density clustering blends two terms: a Jaccard distance
between refined k-reciprocal neighborhoods (computed through an exponential
similarity matrix) and a per-sample source-proximity penalty that grows with
the distance to the nearest source embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricConfig:
    """k: reciprocal-neighborhood size; lam: blend weight in [0, 1]."""

    k: int = 20
    lam: float = 0.1

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam!r}")


def _check_embeddings(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a 2-d matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings contain non-finite entries")
    return x


def check_distance_matrix(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if d.ndim != 2 or d.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if not np.all(np.isfinite(d)):
        raise ValueError("distance matrix contains non-finite entries")
    if np.any(d < 0):
        raise ValueError("distance matrix contains negative entries")
    if np.any(np.diag(d) != 0.0):
        raise ValueError("distance matrix must have a zero diagonal")
    if not np.allclose(d, d.T, rtol=0.0, atol=1e-9):
        raise ValueError("distance matrix must be symmetric")
    return d


def check_similarity_matrix(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    if m.ndim != 2 or m.shape != (n, n):
        raise ValueError("similarity matrix must be square")
    if not np.all(np.isfinite(m)):
        raise ValueError("similarity matrix contains non-finite entries")
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("similarity entries must lie in [0, 1]")
    if np.any(np.diag(m) != 1.0):
        raise ValueError("similarity matrix must have a unit diagonal")
    return m


def pairwise_sq_euclidean(x: np.ndarray) -> np.ndarray:
    """Symmetric matrix of squared Euclidean distances with a zero diagonal."""
    x = _check_embeddings(x)
    if x.shape[0] < 2:
        raise ValueError("need at least two embeddings")
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    d = (d + d.T) / 2.0
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _nearest_neighbor_membership(d: np.ndarray, k: int) -> np.ndarray:
    """Boolean matrix: memb[i, j] is true iff j is within i's k-NN radius.

    Ties at the k-th distance are included, so duplicate points keep fully
    mutual neighborhoods instead of an index-order artifact.
    """
    n = d.shape[0]
    memb = np.zeros((n, n), dtype=bool)
    for i in range(n):
        row = d[i].copy()
        row[i] = np.inf
        kth = np.partition(row, k - 1)[k - 1]
        memb[i] = row <= kth
    return memb


def _mutual_membership(d: np.ndarray, k: int) -> np.ndarray:
    """mutual[i, j] true iff i and j are each within the other's k NN."""
    if k == 0:
        return np.zeros((d.shape[0],) * 2, dtype=bool)
    memb = _nearest_neighbor_membership(d, k)
    return memb & memb.T


def _refined_set(mutual_k: np.ndarray, mutual_half: np.ndarray, i: int) -> np.ndarray:
    """Refined k-reciprocal set for sample i (i itself always included).

    Starting from the mutual k-NN set of i, each member's mutual floor(k/2)
    neighborhood is merged in when at least two thirds of it already overlaps
    the base set.
    """
    base = np.flatnonzero(mutual_k[i])
    keep = mutual_k[i].copy()
    keep[i] = True
    for q in base:
        half = mutual_half[q]
        size = int(np.count_nonzero(half))
        overlap = int(np.count_nonzero(half & mutual_k[i]))
        if 3 * overlap >= 2 * size:
            keep |= half
    return np.flatnonzero(keep)


def k_reciprocal_set(d: np.ndarray, i: int, k: int) -> np.ndarray:
    """Refined k-reciprocal set of sample i under distance matrix d."""
    d = check_distance_matrix(d)
    n = d.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")
    if not 0 <= i < n:
        raise ValueError(f"sample index out of range: {i}")
    mutual_k = _mutual_membership(d, k)
    mutual_half = _mutual_membership(d, k // 2)
    return _refined_set(mutual_k, mutual_half, i)


def similarity_matrix(x: np.ndarray, k: int) -> np.ndarray:
    """exp(-squared distance) over refined k-reciprocal sets, zero elsewhere."""
    x = _check_embeddings(x)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")
    d = pairwise_sq_euclidean(x)
    mutual_k = _mutual_membership(d, k)
    mutual_half = _mutual_membership(d, k // 2)
    m = np.zeros((n, n))
    for i in range(n):
        idx = _refined_set(mutual_k, mutual_half, i)
        m[i, idx] = np.exp(-d[i, idx])
    np.fill_diagonal(m, 1.0)
    return m


def jaccard_distance(m: np.ndarray) -> np.ndarray:
    """Neighborhood-overlap distance: 1 - sum(min) / sum(max) over row pairs.

    Uses max(a, b) = a + b - min(a, b) so only the (sparse) support of each
    row is touched; the result is symmetrized and clipped into [0, 1].
    """
    m = check_similarity_matrix(m)
    n = m.shape[0]
    row_sums = m.sum(axis=1)
    out = np.empty((n, n))
    for i in range(n):
        idx = np.flatnonzero(m[i])
        mins = np.minimum(m[i, idx][None, :], m[:, idx]).sum(axis=1)
        out[i] = 1.0 - mins / (row_sums[i] + row_sums - mins)
    out = (out + out.T) / 2.0
    np.fill_diagonal(out, 0.0)
    np.clip(out, 0.0, 1.0, out=out)
    return out


def source_proximity(x_target: np.ndarray, x_source: np.ndarray) -> np.ndarray:
    """Per-target penalty 1 - exp(-squared distance to the nearest source embedding)."""
    x_target = _check_embeddings(x_target)
    x_source = _check_embeddings(x_source)
    if x_source.shape[0] == 0 or x_target.shape[0] == 0:
        raise ValueError("both embedding sets must be nonempty")
    if x_source.shape[1] != x_target.shape[1]:
        raise ValueError("embedding dimensions disagree")
    sq_t = np.einsum("ij,ij->i", x_target, x_target)
    sq_s = np.einsum("ij,ij->i", x_source, x_source)
    cross = sq_t[:, None] + sq_s[None, :] - 2.0 * (x_target @ x_source.T)
    nearest = np.maximum(cross.min(axis=1), 0.0)
    return 1.0 - np.exp(-nearest)


def clustering_distance(d_jaccard: np.ndarray, d_source: np.ndarray, lam: float) -> np.ndarray:
    """Blend of the Jaccard term and the pairwise sum of source-proximity terms."""
    d_jaccard = check_distance_matrix(d_jaccard)
    d_source = np.asarray(d_source, dtype=np.float64)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam!r}")
    if d_source.shape != (d_jaccard.shape[0],):
        raise ValueError("source-proximity vector length must match the matrix")
    out = lam * (d_source[:, None] + d_source[None, :]) + (1.0 - lam) * d_jaccard
    np.fill_diagonal(out, 0.0)
    return out
