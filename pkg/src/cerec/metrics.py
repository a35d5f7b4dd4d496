"""Top-K ranking metrics and explanation precision/recall/F1."""

from __future__ import annotations

import math

import numpy as np

from .ckg import InteractionSet
from .recommender import LatentFactors


def recall_at_k(topk, relevant) -> float:
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise ValueError("recall undefined for empty relevant set")
    return sum(1 for x in topk if int(x) in relevant) / len(relevant)


def ndcg_at_k(topk, relevant) -> float:
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise ValueError("ndcg undefined for empty relevant set")
    dcg = sum(1.0 / math.log2(r + 2) for r, x in enumerate(topk) if int(x) in relevant)
    ideal = sum(1.0 / math.log2(r + 2) for r in range(min(len(relevant), len(topk))))
    return dcg / ideal if ideal > 0 else 0.0


def hr_at_k(topk, relevant) -> float:
    relevant = set(int(x) for x in relevant)
    return 1.0 if any(int(x) in relevant for x in topk) else 0.0


def explanation_prf(delta, truth) -> tuple[float, float, float] | None:
    """Precision, recall, F1 of a 0/1 explanation vector against ground truth.

    Returns None when the ground truth is empty (pair is skipped).
    """
    a = (np.asarray(delta) != 0).astype(float)
    o = np.asarray(truth, dtype=float)
    if a.shape != o.shape:
        raise ValueError("delta and truth must share the attribute universe")
    n_true = o.sum()
    if n_true == 0:
        return None
    hits = float(o @ a)
    precision = hits / a.sum() if a.sum() > 0 else 0.0
    recall = hits / n_true
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def rank_all(factors: LatentFactors, exclude: dict[int, list[int]] | None, k: int) -> np.ndarray:
    """Top-k item ids per user (rows), excluded items pushed to the bottom.

    Ties are broken by ascending item id, consistent with :func:`top_k`.
    """
    scores = factors.U @ factors.V.T
    if exclude:
        for u, items in exclude.items():
            scores[u, items] = -np.inf
    n_items = scores.shape[1]
    ids = np.broadcast_to(np.arange(n_items), scores.shape)
    order = np.lexsort((ids, -scores), axis=1)
    return order[:, :k]


def evaluate_ranking(factors: LatentFactors, relevant: InteractionSet, exclude: InteractionSet | None,
                     Ks=(20,)) -> dict[int, dict[str, float]]:
    """Mean Recall/NDCG/HR@K over users with at least one relevant item."""
    rel = relevant.by_user()
    excl = exclude.by_user() if exclude is not None else None
    top = rank_all(factors, excl, max(Ks))
    out = {}
    users = sorted(rel)
    for k in Ks:
        rows = [(recall_at_k(top[u, :k], rel[u]), ndcg_at_k(top[u, :k], rel[u]), hr_at_k(top[u, :k], rel[u]))
                for u in users]
        arr = np.asarray(rows) if rows else np.zeros((0, 3))
        out[k] = {
            "recall": float(arr[:, 0].mean()) if len(arr) else 0.0,
            "ndcg": float(arr[:, 1].mean()) if len(arr) else 0.0,
            "hr": float(arr[:, 2].mean()) if len(arr) else 0.0,
            "users": len(users),
        }
    return out


def fast_recall(factors: LatentFactors, relevant: dict[int, list[int]], exclude: dict[int, list[int]] | None,
                k: int = 20) -> float:
    top = rank_all(factors, exclude, k)
    vals = [recall_at_k(top[u], items) for u, items in relevant.items() if items]
    return float(np.mean(vals)) if vals else 0.0
