"""Retrieval metrics (mAP, CMC) and pair-counting cluster quality.

Retrieval follows the standard cross-camera protocol: gallery entries sharing
both identity and camera with the query are excluded from that query's
ranking, and queries left without any valid match are skipped and tallied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RetrievalResult:
    map: float
    cmc: np.ndarray
    n_skipped: int = 0

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])


def average_precision(ranked_relevance: np.ndarray) -> float:
    """Mean of precision-at-k over the relevant ranks of a binary ranking."""
    rel = np.asarray(ranked_relevance, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise ValueError("ranking contains no relevant item")
    hits = np.cumsum(rel)
    precisions = hits[rel] / (np.flatnonzero(rel) + 1)
    return float(precisions.sum() / n_rel)


def map_and_cmc(
    query_emb: np.ndarray,
    gallery_emb: np.ndarray,
    query_ids: np.ndarray,
    gallery_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_cams: np.ndarray,
    max_rank: int = 10,
) -> RetrievalResult:
    """Mean average precision and cumulative match curve over all queries.

    Ranking is by ascending Euclidean distance with ties broken by gallery
    index. cmc[k] is the fraction of non-skipped queries with a correct match
    in the top k+1.
    """
    query_emb = np.asarray(query_emb, dtype=np.float64)
    gallery_emb = np.asarray(gallery_emb, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    query_cams = np.asarray(query_cams)
    gallery_cams = np.asarray(gallery_cams)
    if query_emb.shape[0] != query_ids.shape[0] or gallery_emb.shape[0] != gallery_ids.shape[0]:
        raise ValueError("embedding/id lengths disagree")
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")

    sq_q = np.einsum("ij,ij->i", query_emb, query_emb)
    sq_g = np.einsum("ij,ij->i", gallery_emb, gallery_emb)
    dist = sq_q[:, None] + sq_g[None, :] - 2.0 * (query_emb @ gallery_emb.T)

    aps: list[float] = []
    cmc_rows: list[np.ndarray] = []
    skipped = 0
    for q in range(query_emb.shape[0]):
        junk = (gallery_ids == query_ids[q]) & (gallery_cams == query_cams[q])
        keep = np.flatnonzero(~junk)
        matches_any = gallery_ids[keep] == query_ids[q]
        if keep.size == 0 or not matches_any.any():
            skipped += 1
            continue
        order = np.argsort(dist[q, keep], kind="stable")
        ranked = matches_any[order]
        aps.append(average_precision(ranked))
        first = int(np.argmax(ranked))
        row = np.zeros(max_rank)
        if first < max_rank:
            row[first:] = 1.0
        cmc_rows.append(row)
    if not aps:
        raise ValueError("every query was skipped; no valid cross-camera matches")
    cmc = np.mean(cmc_rows, axis=0)
    return RetrievalResult(float(np.mean(aps)), cmc, skipped)


def pairwise_f_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """Pair-counting F1 between predicted clusters and ground-truth identities.

    Over all unordered sample pairs, precision is the fraction of same-cluster
    pairs that share a true identity and recall the fraction of same-identity
    pairs placed in one cluster. Degenerate cases (no co-labeled pairs on
    either side, or P + R = 0) score 0.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError("pred and truth must be 1-d arrays of equal length")

    def pair_count(counts: np.ndarray) -> int:
        return int((counts * (counts - 1) // 2).sum())

    _, pred_counts = np.unique(pred, return_counts=True)
    _, truth_counts = np.unique(truth, return_counts=True)
    same_pred = pair_count(pred_counts)
    same_truth = pair_count(truth_counts)
    if same_pred == 0 or same_truth == 0:
        return 0.0
    _, cell_counts = np.unique(np.stack([pred, truth]), axis=1, return_counts=True)
    tp = pair_count(cell_counts)
    precision = tp / same_pred
    recall = tp / same_truth
    if precision + recall == 0.0:
        return 0.0
    return float(2.0 * precision * recall / (precision + recall))
