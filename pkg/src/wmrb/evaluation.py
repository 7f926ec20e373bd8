"""
Top-k evaluation against held-out interactions.

Every non-train item is ranked for each user with a non-empty test set;
precision, recall and NDCG use binary gains.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionDataset, popularity_counts
from .model import ModelParams, entity_reprs

__all__ = [
    "EmptyEvaluationError",
    "MetricsReport",
    "ModelScorer",
    "PopularityScorer",
    "rank_items",
    "rank_items_for_user",
    "precision_at_k",
    "recall_at_k",
    "ndcg_at_k",
    "evaluate",
]


class EmptyEvaluationError(ValueError):
    pass


class ModelScorer:
    """Scores every item for a user from trained parameters."""

    def __init__(self, params: ModelParams, user_features, item_features):
        params.check_compatible(user_features, item_features)
        self.params = params
        self.user_features = user_features
        self.item_vecs, self.item_biases = entity_reprs(
            params.item_embeddings, params.item_biases, item_features
        )

    def scores(self, user: int) -> np.ndarray:
        u, bu = entity_reprs(
            self.params.user_embeddings, self.params.user_biases, self.user_features, [user]
        )
        return self.item_vecs @ u[0] + bu[0] + self.item_biases


class PopularityScorer:
    """Same scores for everyone: training interaction counts."""

    def __init__(self, dataset: InteractionDataset):
        self.counts = popularity_counts(dataset).astype(np.float64)

    def scores(self, user: int) -> np.ndarray:
        return self.counts


def rank_items(scores, k, exclude=()) -> np.ndarray:
    """Top ``k`` item ids by descending score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(scores.size, dtype=bool)
    keep[np.asarray(exclude, dtype=np.int64)] = False
    ids = np.flatnonzero(keep)
    order = np.argsort(-scores[ids], kind="stable")
    return ids[order[:k]]


def rank_items_for_user(scorer, user: int, k: int, exclude=()) -> np.ndarray:
    return rank_items(scorer.scores(user), k, exclude)


def _hits(ranked, relevant, k):
    rel = set(int(i) for i in relevant)
    return [int(i) in rel for i in ranked[:k]]


def precision_at_k(ranked, relevant, k) -> float:
    return sum(_hits(ranked, relevant, k)) / k


def recall_at_k(ranked, relevant, k) -> float:
    if len(relevant) == 0:
        raise ValueError("recall undefined for empty relevant set")
    return sum(_hits(ranked, relevant, k)) / len(relevant)


def ndcg_at_k(ranked, relevant, k) -> float:
    if len(relevant) == 0:
        raise ValueError("ndcg undefined for empty relevant set")
    dcg = sum(1.0 / math.log2(pos + 2) for pos, hit in enumerate(_hits(ranked, relevant, k)) if hit)
    idcg = sum(1.0 / math.log2(pos + 2) for pos in range(min(k, len(relevant))))
    return dcg / idcg


@dataclass
class MetricsReport:
    k: list[int]
    precision: dict[int, float] = field(default_factory=dict)
    recall: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    users_evaluated: int = 0

    def to_dict(self, percent: bool = False):
        f = 100.0 if percent else 1.0
        return {
            "k": list(self.k),
            "precision": {str(k): v * f for k, v in self.precision.items()},
            "recall": {str(k): v * f for k, v in self.recall.items()},
            "ndcg": {str(k): v * f for k, v in self.ndcg.items()},
            "users_evaluated": self.users_evaluated,
        }

    def to_json(self, percent: bool = False, **kwargs) -> str:
        return json.dumps(self.to_dict(percent), **kwargs)


def evaluate(scorer, dataset: InteractionDataset, k_list=(5, 30)) -> MetricsReport:
    """Mean P@k, R@k and NDCG@k over users with held-out items."""
    k_list = sorted(set(int(k) for k in k_list))
    if not k_list or k_list[0] < 1:
        raise ValueError("k values must be >= 1")
    sums = {name: {k: 0.0 for k in k_list} for name in ("precision", "recall", "ndcg")}
    n = 0
    k_max = k_list[-1]
    for user in range(dataset.num_users):
        test = dataset.test_items(user)
        if test.size == 0:
            continue
        ranked = rank_items_for_user(scorer, user, k_max, dataset.train_items(user))
        for k in k_list:
            sums["precision"][k] += precision_at_k(ranked, test, k)
            sums["recall"][k] += recall_at_k(ranked, test, k)
            sums["ndcg"][k] += ndcg_at_k(ranked, test, k)
        n += 1
    if n == 0:
        raise EmptyEvaluationError("no users with test interactions to evaluate")
    return MetricsReport(
        k_list,
        {k: v / n for k, v in sums["precision"].items()},
        {k: v / n for k, v in sums["recall"].items()},
        {k: v / n for k, v in sums["ndcg"].items()},
        n,
    )
