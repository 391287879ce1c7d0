"""Source training and clustering-based adaptation.

Stage 1 trains the encoder on labeled source data with a unit-weighted sum of
batch-hard triplet loss and cross-entropy. Stage 2 repeatedly clusters the
target embeddings under the blended k-reciprocal/Jaccard distance and
fine-tunes on the pseudo-labeled inliers with triplet loss only; outliers are
discarded from training in this stage.

Target ground-truth identities are never read here: stage functions accept a
label-locked FeatureSet, and per-round retrieval/cluster-quality metrics come
from an injected evaluator callback owned by evaluation-side code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from asymct.cluster import (
    ClusterAssignment,
    ClusterConfig,
    assign_outlier_labels,
    compute_eps,
    dbscan,
    kmeans_with_outliers,
    merged_labels,
)
from asymct.datasynth import FeatureSet
from asymct.encoder import (
    AdamState,
    EncoderParams,
    TrainConfig,
    add_grads,
    ce_loss_and_grad,
    forward,
    init_encoder,
    l2_normalize,
    opt_step,
    pk_sample,
    triplet_loss_and_grad,
)
from asymct.metric import (
    MetricConfig,
    clustering_distance,
    jaccard_distance,
    pairwise_sq_euclidean,
    similarity_matrix,
    source_proximity,
)

# Seed stream keys, one per pipeline phase, so staged reuse of intermediate
# models reproduces a monolithic run exactly.
STAGE1_KEY = 11
STAGE2_KEY = 21
STAGE2_CLUSTER_KEY = 22
COTEACH_MODEL_KEY = 30
COTEACH_CLUSTER_KEY = 33


class AdaptationError(RuntimeError):
    """A round produced a state the pipeline cannot train on."""


@dataclass(frozen=True)
class AdaptConfig:
    e1: int = 30
    e2: int = 5
    e3: int = 10
    r2: int = 8
    r3: int = 5
    metric: MetricConfig = MetricConfig()
    cluster: ClusterConfig = ClusterConfig()
    train: TrainConfig = TrainConfig()

    def validate(self) -> None:
        for name in ("e1", "e2", "e3", "r2", "r3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        self.metric.validate()
        self.cluster.validate()
        self.train.validate()


@dataclass
class RoundRecord:
    round: int
    f_score: float
    n_outliers: int
    n_clusters: int
    map: float
    rank1: float


@dataclass
class TargetClustering:
    """One clustering pass: the inlier/outlier split plus merged pseudo labels."""

    assignment: ClusterAssignment
    pseudo_labels: np.ndarray  # full length, outliers carry nearest-inlier labels
    eps: float | None


# evaluator(params, pseudo_labels) -> {"map": ..., "rank1": ..., "f_score": ...}
Evaluator = Callable[[EncoderParams, np.ndarray | None], dict]


def _batches_per_epoch(n_samples: int, batch_size: int) -> int:
    return max(1, n_samples // batch_size)


def train_source(source: FeatureSet, cfg: AdaptConfig) -> EncoderParams:
    """Supervised source training: triplet + cross-entropy, e1 epochs."""
    cfg.validate()
    train = cfg.train
    rng = np.random.default_rng([train.seed, STAGE1_KEY])
    ids = source.identity
    classes, labels = np.unique(ids, return_inverse=True)
    params = init_encoder(source.dim, train, rng, n_classes=classes.size)
    opt = AdamState.initial(params)
    for _ in range(cfg.e1):
        for _ in range(_batches_per_epoch(source.n, train.batch_size)):
            idx = pk_sample(labels, train.p_identities, train.k_instances, rng)
            xb, yb = source.features[idx], labels[idx]
            _, tri_grads = triplet_loss_and_grad(params, xb, yb, train.margin, normalize=True)
            _, ce_grads = ce_loss_and_grad(params, xb, yb)
            opt, params = opt_step(opt, params, add_grads(tri_grads, ce_grads), train.lr_source)
    return params


def cluster_target(
    model: EncoderParams,
    target: FeatureSet,
    source: FeatureSet,
    metric_cfg: MetricConfig,
    cluster_cfg: ClusterConfig,
    seed: int = 0,
) -> TargetClustering:
    """Embed the target set and split it into pseudo-labeled inliers and outliers.

    Embeddings are row-normalized before the distance chain so the exponential
    similarity stays discriminative at any training scale. Outliers receive
    the label of their nearest inlier under the same matrix the backend used.
    """
    metric_cfg.validate()
    cluster_cfg.validate()
    x_raw = forward(model, target.features)
    x_t = l2_normalize(x_raw)
    if cluster_cfg.backend == "dbscan":
        x_s = l2_normalize(forward(model, source.features))
        k_eff = min(metric_cfg.k, x_t.shape[0] - 1)
        sim = similarity_matrix(x_t, k_eff)
        d_j = jaccard_distance(sim)
        d_w = source_proximity(x_t, x_s)
        blended = clustering_distance(d_j, d_w, metric_cfg.lam)
        eps = cluster_cfg.eps_abs if cluster_cfg.eps_abs is not None else compute_eps(blended, cluster_cfg.rho)
        assignment = dbscan(blended, eps, cluster_cfg.min_pts)
    else:
        assignment = kmeans_with_outliers(x_t, cluster_cfg.k_means_k, cluster_cfg.outlier_frac, seed)
        eps = None
    # Label transfer runs on distances between raw-scale embeddings of the
    # current model, so pseudo labels for outliers improve as the model does.
    # The neighborhood-overlap matrix is useless here (an outlier's Jaccard
    # row saturates near 1 against every sample) and row normalization
    # scrambles far-out samples toward arbitrary directions.
    transfer = pairwise_sq_euclidean(x_raw)
    if assignment.n_clusters == 0:
        raise AdaptationError(
            "clustering found no clusters; increase rho (or eps_abs) to loosen "
            "the density radius"
        )
    outlier_labels = assign_outlier_labels(transfer, assignment)
    pseudo = merged_labels(assignment, outlier_labels)
    return TargetClustering(assignment, pseudo, eps)


def _drop_rare_identities(indices: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Remove samples whose pseudo identity has fewer than two instances."""
    ids, counts = np.unique(labels, return_counts=True)
    keep_ids = ids[counts >= 2]
    mask = np.isin(labels, keep_ids)
    return indices[mask], labels[mask]


def finetune_triplet(
    params: EncoderParams,
    features: np.ndarray,
    labels: np.ndarray,
    train: TrainConfig,
    epochs: int,
    rng: np.random.Generator,
    opt: AdamState | None = None,
) -> tuple[EncoderParams, AdamState]:
    """Triplet-only fine-tuning over PK batches of the given pool."""
    if opt is None:
        opt = AdamState.initial(params)
    n_ids = np.unique(labels).size
    p_eff = min(train.p_identities, n_ids)
    if p_eff < 2:
        raise AdaptationError("fewer than two identities available for triplet batches")
    for _ in range(epochs):
        for _ in range(_batches_per_epoch(labels.size, train.batch_size)):
            idx = pk_sample(labels, p_eff, train.k_instances, rng)
            _, grads = triplet_loss_and_grad(
                params, features[idx], labels[idx], train.margin, normalize=True
            )
            opt, params = opt_step(opt, params, grads, train.lr_adapt)
    return params, opt


def adapt_stage2(
    m_src: EncoderParams,
    target: FeatureSet,
    source: FeatureSet,
    cfg: AdaptConfig,
    evaluator: Evaluator | None = None,
) -> tuple[EncoderParams, list[RoundRecord]]:
    """r2 rounds of clustering plus triplet fine-tuning on pseudo-labeled inliers."""
    cfg.validate()
    params = m_src.without_classifier()
    rng = np.random.default_rng([cfg.train.seed, STAGE2_KEY])
    records: list[RoundRecord] = []
    for rnd in range(cfg.r2):
        tc = cluster_target(
            params, target, source, cfg.metric, cfg.cluster,
            seed=_derived_seed(cfg.train.seed, STAGE2_CLUSTER_KEY, rnd),
        )
        inliers = tc.assignment.inlier_indices()
        if inliers.size == 0:
            raise AdaptationError(
                f"round {rnd}: clustering left no inliers "
                f"(n_clusters={tc.assignment.n_clusters}); loosen the density radius"
            )
        train_idx, train_labels = _drop_rare_identities(inliers, tc.assignment.labels[inliers])
        if np.unique(train_labels).size < 2:
            raise AdaptationError(
                f"round {rnd}: fewer than two usable pseudo identities among inliers"
            )
        params, _ = finetune_triplet(
            params, target.features[train_idx], train_labels, cfg.train, cfg.e2, rng
        )
        metrics = evaluator(params, tc.pseudo_labels) if evaluator else {}
        records.append(
            RoundRecord(
                round=rnd,
                f_score=float(metrics.get("f_score", math.nan)),
                n_outliers=tc.assignment.n_outliers,
                n_clusters=tc.assignment.n_clusters,
                map=float(metrics.get("map", math.nan)),
                rank1=float(metrics.get("rank1", math.nan)),
            )
        )
    return params, records


def _derived_seed(seed: int, key: int, rnd: int) -> int:
    # Small, collision-free combination for generator seeding.
    return int(np.random.SeedSequence([seed, key, rnd]).generate_state(1)[0])
