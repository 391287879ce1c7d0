"""Asymmetric co-teaching between a main model and a collaborator.

Each round re-clusters the target set with the main model's embeddings, then
alternates strictly by iteration parity: on even iterations the collaborator
scores an outlier batch and its small-loss anchors are mixed with an inlier
batch to update the main model; on odd iterations the main model scores an
inlier batch and the collaborator trains on the selected subset. The model
that computes the selection losses is never the one updated by that step.

The symmetric variants used for ablations (plain co-teaching over one pool,
and outlier merging without any selection) share the same round structure.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from asymct.adapt import (
    AdaptConfig,
    COTEACH_CLUSTER_KEY,
    COTEACH_MODEL_KEY,
    Evaluator,
    _derived_seed,
    cluster_target,
)
from asymct.datasynth import FeatureSet
from asymct.encoder import (
    AdamState,
    EncoderParams,
    TrainConfig,
    forward,
    opt_step,
    pk_sample,
    triplet_loss_and_grad,
)

logger = logging.getLogger(__name__)

MAIN = "main"
COLLABORATOR = "co"

RATIO_START = 0.20


@dataclass
class CoteachState:
    main: EncoderParams
    collaborator: EncoderParams
    ratio_schedule: Callable[[int], float]
    round: int = 0


@dataclass
class SelectionReport:
    selected_indices: np.ndarray
    rejected_indices: np.ndarray
    threshold_loss: float


@dataclass
class TraceEvent:
    """One small-loss selection event; selector/updated feed the gating audit."""

    round: int
    epoch: int
    iteration: int
    parity: int
    n_selected: int
    threshold_loss: float
    selector: str
    updated: str


@dataclass
class ActRecord:
    round: int
    model: str
    map: float
    rank1: float
    f_score: float
    n_outliers: int


def ratio_at(epoch: int, e3: int) -> float:
    """Small-loss keep ratio: linear ramp from 20% to 100% across the epochs."""
    if e3 < 1:
        raise ValueError("e3 must be >= 1")
    if not 0 <= epoch < e3:
        raise ValueError(f"epoch {epoch} out of range for e3={e3}")
    if e3 == 1:
        return 1.0
    return RATIO_START + (1.0 - RATIO_START) * epoch / (e3 - 1)


def select_small_loss(per_anchor_losses: np.ndarray, ratio: float) -> SelectionReport:
    """Keep the ceil(ratio * B) smallest-loss anchors; ties go to lower indices."""
    losses = np.asarray(per_anchor_losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ValueError("per-anchor losses must be a nonempty vector")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio!r}")
    count = int(math.ceil(ratio * losses.size))
    order = np.argsort(losses, kind="stable")
    selected = np.sort(order[:count])
    rejected = np.sort(order[count:])
    return SelectionReport(selected, rejected, float(losses[order[count - 1]]))


@dataclass
class SamplePool:
    """Feature rows plus pseudo labels for one sampling pool."""

    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray  # positions in the target set, for bookkeeping

    @property
    def size(self) -> int:
        return self.labels.size


@dataclass
class _RoundContext:
    opt_main: AdamState
    opt_co: AdamState
    rng_main: np.random.Generator
    rng_co: np.random.Generator
    train: TrainConfig
    trace: list[TraceEvent] = field(default_factory=list)


def _pk_batch(pool: SamplePool, train: TrainConfig, rng: np.random.Generator) -> np.ndarray | None:
    """PK batch indices into the pool, or None when no valid batch exists."""
    if pool.size == 0:
        return None
    n_ids = np.unique(pool.labels).size
    if n_ids < 2:
        logger.warning("pool has a single pseudo identity; skipping batch")
        return None
    p_eff = min(train.p_identities, n_ids)
    return pk_sample(pool.labels, p_eff, train.k_instances, rng)


def _outlier_batch(pool: SamplePool, train: TrainConfig, rng: np.random.Generator) -> np.ndarray | None:
    """Uniform outlier draw; positives for these anchors come from the inlier batch."""
    if pool.size == 0:
        return None
    count = min(train.batch_size, pool.size)
    return rng.choice(pool.size, size=count, replace=False)


def _covering_inlier_batch(
    pool: SamplePool,
    cover_labels: np.ndarray,
    train: TrainConfig,
    rng: np.random.Generator,
) -> np.ndarray | None:
    """PK inlier batch whose identities prefer the given pseudo labels.

    Outlier anchors are scored against same-cluster inliers, so the inlier
    half of the batch must carry the outliers' clusters wherever it can.
    """
    ids = np.unique(pool.labels)
    if ids.size < 2:
        logger.warning("pool has a single pseudo identity; skipping batch")
        return None
    p_eff = min(train.p_identities, ids.size)
    # Cover at most half the batch identities so the inlier half keeps its
    # stabilizing diversity even when the outlier pool has shrunk.
    cover_cap = max(1, p_eff // 2)
    wanted = np.intersect1d(np.unique(cover_labels), ids)
    if wanted.size > cover_cap:
        wanted = rng.choice(wanted, size=cover_cap, replace=False)
    others = np.setdiff1d(ids, wanted)
    fill = rng.choice(others, size=p_eff - wanted.size, replace=False) if p_eff > wanted.size else []
    chosen = np.concatenate([wanted, np.asarray(fill, dtype=wanted.dtype)])
    out = []
    for ident in chosen:
        idx = np.flatnonzero(pool.labels == ident)
        out.append(rng.choice(idx, size=train.k_instances, replace=idx.size < train.k_instances))
    return np.concatenate(out)


def _per_anchor_losses(
    scorer: EncoderParams,
    features: np.ndarray,
    labels: np.ndarray,
    margin: float,
    context: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Batch-hard per-anchor losses under the scoring model (forward only).

    With ``context``, the anchors are mined within the concatenation of the
    anchor batch and the context batch; only the anchors' losses are returned.
    This keeps outlier anchors scored against same-cluster inliers instead of
    against their own (often duplicate) pool mates. Scoring runs on raw-scale
    embeddings: row normalization saturates distances for far-out samples and
    would flatten exactly the losses the small-loss filter needs to rank.
    """
    from asymct.encoder import _mine_batch

    n_anchors = labels.shape[0]
    if context is not None:
        features = np.concatenate([features, context[0]])
        labels = np.concatenate([labels, context[1]])
    emb = forward(scorer, features)
    losses, _, _, _ = _mine_batch(emb, labels, margin)
    return losses[:n_anchors]


def act_epoch(
    state: CoteachState,
    inlier_pool: SamplePool,
    outlier_pool: SamplePool,
    epoch: int,
    cfg: AdaptConfig,
    ctx: _RoundContext,
) -> CoteachState:
    """One co-teaching epoch: enough iterations to enumerate the inlier pool once.

    Even iterations update the main model on selected outliers mixed with a
    full inlier batch; odd iterations update the collaborator on the selected
    subset of an inlier batch. When the outlier pool is empty or unusable, the
    main model falls back to plain fine-tuning on the inlier batch.
    """
    if inlier_pool.size == 0:
        raise ValueError("inlier pool must be nonempty")
    train = ctx.train
    keep = state.ratio_schedule(epoch)
    iterations = max(1, math.ceil(inlier_pool.size / train.batch_size))
    main, co = state.main, state.collaborator
    for it in range(iterations):
        if it % 2 == 0:
            batch_o = _outlier_batch(outlier_pool, train, ctx.rng_main)
            if batch_o is not None:
                cover = outlier_pool.labels[batch_o]
                batch_i = _covering_inlier_batch(inlier_pool, cover, train, ctx.rng_main)
            else:
                batch_i = _pk_batch(inlier_pool, train, ctx.rng_main)
            if batch_i is None:
                logger.warning("epoch %d iter %d: no inlier batch; skipped", epoch, it)
                continue
            xb = inlier_pool.features[batch_i]
            yb = inlier_pool.labels[batch_i]
            if batch_o is not None:
                xo = outlier_pool.features[batch_o]
                yo = outlier_pool.labels[batch_o]
                losses = _per_anchor_losses(co, xo, yo, train.margin, context=(xb, yb))
                report = select_small_loss(losses, keep)
                ctx.trace.append(
                    TraceEvent(
                        state.round, epoch, it, 0,
                        report.selected_indices.size, report.threshold_loss,
                        selector=COLLABORATOR, updated=MAIN,
                    )
                )
                xb = np.concatenate([xo[report.selected_indices], xb])
                yb = np.concatenate([yo[report.selected_indices], yb])
            _, grads = triplet_loss_and_grad(main, xb, yb, train.margin, normalize=True)
            ctx.opt_main, main = opt_step(ctx.opt_main, main, grads, train.lr_coteach)
        else:
            batch_i = _pk_batch(inlier_pool, train, ctx.rng_co)
            if batch_i is None:
                logger.warning("epoch %d iter %d: no inlier batch; skipped", epoch, it)
                continue
            xb = inlier_pool.features[batch_i]
            yb = inlier_pool.labels[batch_i]
            losses = _per_anchor_losses(main, xb, yb, train.margin)
            report = select_small_loss(losses, keep)
            ctx.trace.append(
                TraceEvent(
                    state.round, epoch, it, 1,
                    report.selected_indices.size, report.threshold_loss,
                    selector=MAIN, updated=COLLABORATOR,
                )
            )
            xs = xb[report.selected_indices]
            ys = yb[report.selected_indices]
            _, grads = triplet_loss_and_grad(co, xs, ys, train.margin, normalize=True)
            ctx.opt_co, co = opt_step(ctx.opt_co, co, grads, train.lr_coteach)
    return CoteachState(main, co, state.ratio_schedule, state.round)


def _ct_epoch(
    state: CoteachState,
    pool: SamplePool,
    epoch: int,
    ctx: _RoundContext,
) -> CoteachState:
    """Symmetric co-teaching epoch: both models draw from the same pool."""
    train = ctx.train
    keep = state.ratio_schedule(epoch)
    iterations = max(1, math.ceil(pool.size / train.batch_size))
    main, co = state.main, state.collaborator
    for it in range(iterations):
        if it % 2 == 0:
            scorer, updated_name = co, MAIN
            rng, opt = ctx.rng_main, ctx.opt_main
        else:
            scorer, updated_name = main, COLLABORATOR
            rng, opt = ctx.rng_co, ctx.opt_co
        batch = _pk_batch(pool, train, rng)
        if batch is None:
            logger.warning("epoch %d iter %d: no batch; skipped", epoch, it)
            continue
        xb, yb = pool.features[batch], pool.labels[batch]
        losses = _per_anchor_losses(scorer, xb, yb, train.margin)
        report = select_small_loss(losses, keep)
        ctx.trace.append(
            TraceEvent(
                state.round, epoch, it, it % 2,
                report.selected_indices.size, report.threshold_loss,
                selector=MAIN if updated_name == COLLABORATOR else COLLABORATOR,
                updated=updated_name,
            )
        )
        xs, ys = xb[report.selected_indices], yb[report.selected_indices]
        if it % 2 == 0:
            _, grads = triplet_loss_and_grad(main, xs, ys, train.margin, normalize=True)
            ctx.opt_main, main = opt_step(ctx.opt_main, main, grads, train.lr_coteach)
        else:
            _, grads = triplet_loss_and_grad(co, xs, ys, train.margin, normalize=True)
            ctx.opt_co, co = opt_step(ctx.opt_co, co, grads, train.lr_coteach)
    return CoteachState(main, co, state.ratio_schedule, state.round)


def _pools_from_clustering(target: FeatureSet, tc) -> tuple[SamplePool, SamplePool]:
    inliers = tc.assignment.inlier_indices()
    outliers = tc.assignment.outlier_indices()
    pool_i = SamplePool(target.features[inliers], tc.assignment.labels[inliers], inliers)
    pool_o = SamplePool(target.features[outliers], tc.pseudo_labels[outliers], outliers)
    return pool_i, pool_o


def _round_records(
    evaluator: Evaluator | None, rnd: int, tc, main: EncoderParams, co: EncoderParams
) -> list[ActRecord]:
    records = []
    for name, model in ((MAIN, main), (COLLABORATOR, co)):
        metrics = evaluator(model, tc.pseudo_labels) if evaluator else {}
        records.append(
            ActRecord(
                round=rnd,
                model=name,
                map=float(metrics.get("map", math.nan)),
                rank1=float(metrics.get("rank1", math.nan)),
                f_score=float(metrics.get("f_score", math.nan)),
                n_outliers=tc.assignment.n_outliers,
            )
        )
    return records


def _fresh_context(cfg: AdaptConfig, rnd: int, main, co, model_seeds) -> _RoundContext:
    seed_main, seed_co = model_seeds
    return _RoundContext(
        opt_main=AdamState.initial(main),
        opt_co=AdamState.initial(co),
        rng_main=np.random.default_rng([seed_main, COTEACH_MODEL_KEY, rnd]),
        rng_co=np.random.default_rng([seed_co, COTEACH_MODEL_KEY, rnd]),
        train=cfg.train,
    )


def _default_model_seeds(seed: int) -> tuple[int, int]:
    return seed + 101, seed + 202


def run_act(
    m_ada: EncoderParams,
    target: FeatureSet,
    source: FeatureSet,
    cfg: AdaptConfig,
    evaluator: Evaluator | None = None,
    model_seeds: tuple[int, int] | None = None,
) -> tuple[EncoderParams, list[ActRecord], list[TraceEvent]]:
    """Asymmetric co-teaching for r3 rounds; returns the final main model.

    Both models start from the stage-2 model. Every round re-clusters the
    target with the main model's embeddings, restarts the keep-ratio schedule
    and optimizer states, and runs e3 co-teaching epochs.
    """
    cfg.validate()
    if model_seeds is None:
        model_seeds = _default_model_seeds(cfg.train.seed)
    main = m_ada.without_classifier()
    co = m_ada.without_classifier()
    records: list[ActRecord] = []
    trace: list[TraceEvent] = []
    for rnd in range(cfg.r3):
        tc = cluster_target(
            main, target, source, cfg.metric, cfg.cluster,
            seed=_derived_seed(cfg.train.seed, COTEACH_CLUSTER_KEY, rnd),
        )
        pool_i, pool_o = _pools_from_clustering(target, tc)
        if pool_i.size == 0:
            raise ValueError(f"round {rnd}: no inliers to co-teach on")
        state = CoteachState(main, co, lambda e: ratio_at(e, cfg.e3), round=rnd)
        ctx = _fresh_context(cfg, rnd, main, co, model_seeds)
        for epoch in range(cfg.e3):
            state = act_epoch(state, pool_i, pool_o, epoch, cfg, ctx)
        main, co = state.main, state.collaborator
        trace.extend(ctx.trace)
        records.extend(_round_records(evaluator, rnd, tc, main, co))
    return main, records, trace


def run_ct(
    m_ada: EncoderParams,
    target: FeatureSet,
    source: FeatureSet,
    cfg: AdaptConfig,
    include_outliers: bool,
    evaluator: Evaluator | None = None,
    model_seeds: tuple[int, int] | None = None,
) -> tuple[EncoderParams, list[ActRecord], list[TraceEvent]]:
    """Symmetric co-teaching over inliers (optionally merged with outliers)."""
    cfg.validate()
    if model_seeds is None:
        model_seeds = _default_model_seeds(cfg.train.seed)
    main = m_ada.without_classifier()
    co = m_ada.without_classifier()
    records: list[ActRecord] = []
    trace: list[TraceEvent] = []
    for rnd in range(cfg.r3):
        tc = cluster_target(
            main, target, source, cfg.metric, cfg.cluster,
            seed=_derived_seed(cfg.train.seed, COTEACH_CLUSTER_KEY, rnd),
        )
        if include_outliers:
            pool = SamplePool(target.features, tc.pseudo_labels, np.arange(target.n))
        else:
            inliers = tc.assignment.inlier_indices()
            pool = SamplePool(target.features[inliers], tc.assignment.labels[inliers], inliers)
        if pool.size == 0:
            raise ValueError(f"round {rnd}: empty training pool")
        state = CoteachState(main, co, lambda e: ratio_at(e, cfg.e3), round=rnd)
        ctx = _fresh_context(cfg, rnd, main, co, model_seeds)
        for epoch in range(cfg.e3):
            state = _ct_epoch(state, pool, epoch, ctx)
        main, co = state.main, state.collaborator
        trace.extend(ctx.trace)
        records.extend(_round_records(evaluator, rnd, tc, main, co))
    return main, records, trace


def run_merge_outliers(
    m_ada: EncoderParams,
    target: FeatureSet,
    source: FeatureSet,
    cfg: AdaptConfig,
    evaluator: Evaluator | None = None,
) -> tuple[EncoderParams, list[ActRecord], list[TraceEvent]]:
    """Single-model ablation: train on inliers merged with pseudo-labeled outliers.

    Shares the round/epoch structure of the co-teaching runs but applies no
    small-loss filtering and keeps a single model.
    """
    cfg.validate()
    params = m_ada.without_classifier()
    records: list[ActRecord] = []
    for rnd in range(cfg.r3):
        tc = cluster_target(
            params, target, source, cfg.metric, cfg.cluster,
            seed=_derived_seed(cfg.train.seed, COTEACH_CLUSTER_KEY, rnd),
        )
        pool = SamplePool(target.features, tc.pseudo_labels, np.arange(target.n))
        rng = np.random.default_rng([cfg.train.seed + 101, COTEACH_MODEL_KEY, rnd])
        opt = AdamState.initial(params)
        iterations = max(1, math.ceil(pool.size / cfg.train.batch_size))
        for _ in range(cfg.e3):
            for _ in range(iterations):
                batch = _pk_batch(pool, cfg.train, rng)
                if batch is None:
                    continue
                _, grads = triplet_loss_and_grad(
                    params, pool.features[batch], pool.labels[batch], cfg.train.margin,
                    normalize=True,
                )
                opt, params = opt_step(opt, params, grads, cfg.train.lr_coteach)
        metrics = evaluator(params, tc.pseudo_labels) if evaluator else {}
        records.append(
            ActRecord(
                round=rnd,
                model=MAIN,
                map=float(metrics.get("map", math.nan)),
                rank1=float(metrics.get("rank1", math.nan)),
                f_score=float(metrics.get("f_score", math.nan)),
                n_outliers=tc.assignment.n_outliers,
            )
        )
    return params, records, []
