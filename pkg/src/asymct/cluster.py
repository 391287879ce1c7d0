"""Density clustering of target samples into pseudo-labeled inliers and outliers.

DBSCAN runs on a precomputed distance matrix with the density radius derived
from the smallest fraction of pairwise distances; outliers can afterwards be
assigned the label of their nearest inlier. A k-means backend that declares
the farthest u-fraction of samples outliers is provided for ablations.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from asymct.metric import check_distance_matrix

OUTLIER = -1


class ClusteringError(RuntimeError):
    """Clustering produced a configuration downstream stages cannot use."""


@dataclass(frozen=True)
class ClusterConfig:
    min_pts: int = 4
    rho: float = 1.6e-3
    backend: str = "dbscan"
    k_means_k: int = 50
    outlier_frac: float = 0.2
    eps_abs: float | None = None  # absolute density radius override

    def validate(self) -> None:
        if self.min_pts < 1:
            raise ValueError(f"min_pts must be >= 1, got {self.min_pts!r}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho!r}")
        if self.backend not in ("dbscan", "kmeans"):
            raise ValueError(f"unknown clustering backend: {self.backend!r}")
        if self.k_means_k < 1:
            raise ValueError(f"k_means_k must be >= 1, got {self.k_means_k!r}")
        if not 0.0 <= self.outlier_frac < 1.0:
            raise ValueError(f"outlier_frac must lie in [0, 1), got {self.outlier_frac!r}")
        if self.eps_abs is not None and self.eps_abs < 0:
            raise ValueError(f"eps_abs must be nonnegative, got {self.eps_abs!r}")


@dataclass
class ClusterAssignment:
    """Per-sample cluster id with OUTLIER (-1) marking unassigned samples."""

    labels: np.ndarray
    n_clusters: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        present = np.unique(self.labels[self.labels != OUTLIER])
        expected = np.arange(self.n_clusters)
        if present.size and not np.array_equal(present, expected):
            raise ValueError("cluster ids must be contiguous 0..n_clusters-1")
        if present.size == 0 and self.n_clusters != 0:
            raise ValueError("n_clusters disagrees with labels")

    def inlier_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels != OUTLIER)

    def outlier_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == OUTLIER)

    @property
    def n_outliers(self) -> int:
        return int(np.count_nonzero(self.labels == OUTLIER))


def compute_eps(d: np.ndarray, rho: float) -> float:
    """Mean of the smallest ceil(rho * n * (n-1)) off-diagonal distances."""
    d = check_distance_matrix(d)
    n = d.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho!r}")
    off = d[~np.eye(n, dtype=bool)]
    count = int(np.ceil(rho * n * (n - 1)))
    count = min(max(count, 1), off.size)
    smallest = np.partition(off, count - 1)[:count]
    eps = float(smallest.mean())
    if eps == 0.0:
        warnings.warn("degenerate distance matrix: density radius is zero", stacklevel=2)
    return eps


def dbscan(d: np.ndarray, eps: float, min_pts: int) -> ClusterAssignment:
    """DBSCAN on a precomputed distance matrix, fully deterministic.

    Core points have at least min_pts samples (self included) within eps;
    clusters are connected components of core points under eps-reachability,
    numbered in order of their lowest core index. Border points join the
    cluster of their lowest-index core neighbor; everything else is an outlier.
    """
    d = check_distance_matrix(d)
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps!r}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be >= 1, got {min_pts!r}")
    n = d.shape[0]
    within = d <= eps
    core = within.sum(axis=1) >= min_pts
    labels = np.full(n, OUTLIER, dtype=np.int64)
    cid = 0
    for start in range(n):
        if not core[start] or labels[start] != OUTLIER:
            continue
        labels[start] = cid
        queue = deque([start])
        while queue:
            q = queue.popleft()
            for r in np.flatnonzero(within[q] & core):
                if labels[r] == OUTLIER:
                    labels[r] = cid
                    queue.append(int(r))
        cid += 1
    for i in range(n):
        if core[i]:
            continue
        neighbors = np.flatnonzero(within[i] & core)
        if neighbors.size:
            labels[i] = labels[neighbors[0]]
    return ClusterAssignment(labels, cid)


def assign_outlier_labels(d_full: np.ndarray, assignment: ClusterAssignment) -> np.ndarray:
    """Cluster label of the nearest inlier for each outlier (ties: lowest index).

    Returned labels are aligned with assignment.outlier_indices().
    """
    d_full = check_distance_matrix(d_full)
    inliers = assignment.inlier_indices()
    outliers = assignment.outlier_indices()
    if inliers.size == 0:
        raise ClusteringError(
            "no inliers to borrow labels from; re-cluster with a looser density radius"
        )
    if outliers.size == 0:
        return np.empty(0, dtype=np.int64)
    # inliers is ascending, so argmin's first-minimum rule is the lowest index.
    nearest = np.argmin(d_full[np.ix_(outliers, inliers)], axis=1)
    return assignment.labels[inliers[nearest]]


def merged_labels(assignment: ClusterAssignment, outlier_labels: np.ndarray) -> np.ndarray:
    """Full pseudo-label vector with outliers replaced by their assigned labels."""
    labels = assignment.labels.copy()
    outliers = assignment.outlier_indices()
    if outliers.size != np.asarray(outlier_labels).size:
        raise ValueError("outlier label count mismatch")
    labels[outliers] = outlier_labels
    return labels


def _sq_dist_to(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    sq_x = np.einsum("ij,ij->i", x, x)
    sq_c = np.einsum("ij,ij->i", centroids, centroids)
    d = sq_x[:, None] + sq_c[None, :] - 2.0 * (x @ centroids.T)
    return np.maximum(d, 0.0)


def kmeans_with_outliers(x: np.ndarray, k: int, u: float, seed: int) -> ClusterAssignment:
    """Lloyd's k-means, then mark the farthest ceil(u * n) samples as outliers.

    Seeding is farthest-point: a random first centroid, then repeatedly the
    sample farthest from its nearest chosen centroid (ties: lowest index).
    Empty clusters are repaired by reseeding at the farthest sample.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a 2-d matrix")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= n, got k={k}, n={n}")
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u must lie in [0, 1), got {u!r}")
    rng = np.random.default_rng(seed)

    chosen = [int(rng.integers(n))]
    best = _sq_dist_to(x, x[chosen]).min(axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(best))
        chosen.append(nxt)
        best = np.minimum(best, _sq_dist_to(x, x[[nxt]])[:, 0])
    centroids = x[chosen].copy()

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        dists = _sq_dist_to(x, centroids)
        new_labels = np.argmin(dists, axis=1)
        sample_d = dists[np.arange(n), new_labels]
        for cid in range(k):
            if not np.any(new_labels == cid):
                far = int(np.argmax(sample_d))
                centroids[cid] = x[far]
                new_labels[far] = cid
                sample_d[far] = 0.0
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        for cid in range(k):
            centroids[cid] = x[labels == cid].mean(axis=0)

    # Direct differences so a sample sitting exactly on its centroid scores 0,
    # which keeps the documented lowest-index tie rule exact.
    sample_d = ((x - centroids[labels]) ** 2).sum(axis=1)
    n_out = int(np.ceil(u * n))
    out_labels = labels.copy()
    if n_out:
        order = np.argsort(-sample_d, kind="stable")
        out_labels[order[:n_out]] = OUTLIER
    keep = np.unique(out_labels[out_labels != OUTLIER])
    remap = {int(old): new for new, old in enumerate(keep)}
    final = np.array(
        [OUTLIER if v == OUTLIER else remap[int(v)] for v in out_labels], dtype=np.int64
    )
    return ClusterAssignment(final, len(keep))
