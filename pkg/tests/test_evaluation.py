import math

import numpy as np
import pytest

from wmrb.data import InteractionDataset, identity_features
from wmrb.evaluation import (
    EmptyEvaluationError,
    ModelScorer,
    PopularityScorer,
    evaluate,
    ndcg_at_k,
    precision_at_k,
    rank_items,
    recall_at_k,
)
from wmrb.model import init_params


class Fixed:
    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)

    def scores(self, user):
        return self.table[user]


def dataset():
    return InteractionDataset.from_pairs(
        [0, 0, 1, 1, 2], [0, 1, 2, 3, 0], 3, 6,
        test_users=[0, 0, 1], test_items=[4, 5, 0],
    )


def test_rank_items_excludes_and_breaks_ties():
    assert rank_items([1, 3, 3, 0], 3).tolist() == [1, 2, 0]
    assert rank_items([1, 3, 3, 0], 3, exclude=[1]).tolist() == [2, 0, 3]


def test_metric_formulas():
    ranked = np.array([7, 2, 9, 4])
    assert precision_at_k(ranked, [2, 4, 5], 4) == 0.5
    assert recall_at_k(ranked, [2, 4, 5], 4) == pytest.approx(2 / 3)
    dcg = 1 / math.log2(3) + 1 / math.log2(5)
    idcg = 1 + 1 / math.log2(3) + 1 / math.log2(4)
    assert ndcg_at_k(ranked, [2, 4, 5], 4) == pytest.approx(dcg / idcg)


def test_oracle_scorer_is_perfect():
    ds = dataset()
    table = np.zeros((3, 6))
    table[0, [4, 5]] = np.inf
    table[1, 0] = np.inf
    rep = evaluate(Fixed(table), ds, (1, 5))
    assert rep.users_evaluated == 2
    assert rep.precision[5] == pytest.approx((2 / 5 + 1 / 5) / 2)
    assert rep.recall[5] == 1.0 and rep.ndcg[5] == 1.0 and rep.precision[1] == 1.0


def test_popularity_matches_hand_computation():
    ds = dataset()
    # train counts: item0=2, items1,2,3=1, items4,5=0
    rep = evaluate(PopularityScorer(ds), ds, (2,))
    # user0 excludes {0,1}: ranks [2,3]; user1 excludes {2,3}: ranks [0,1]
    assert rep.precision[2] == pytest.approx((0 + 0.5) / 2)
    assert rep.recall[2] == pytest.approx((0 + 1) / 2)
    assert rep.ndcg[2] == pytest.approx((0 + 1) / 2)


def test_random_scorers_stay_in_range():
    ds = dataset()
    rng = np.random.default_rng(0)
    for _ in range(100):
        rep = evaluate(Fixed(rng.normal(size=(3, 6))), ds, (1, 3))
        for m in (rep.precision, rep.recall, rep.ndcg):
            assert all(0.0 <= v <= 1.0 for v in m.values())


def test_no_test_users():
    ds = InteractionDataset.from_pairs([0], [0], 1, 2)
    with pytest.raises(EmptyEvaluationError):
        evaluate(PopularityScorer(ds), ds)


def test_report_serialization():
    ds = dataset()
    rep = evaluate(PopularityScorer(ds), ds)
    doc = rep.to_dict(percent=True)
    assert doc["k"] == [5, 30]
    assert set(doc["recall"]) == {"5", "30"}
    assert doc["recall"]["5"] == pytest.approx(100 * rep.recall[5])


def test_model_scorer_uses_dot_plus_biases():
    params = init_params(3, 3, 6, seed=0, scale=1.0)
    params.item_biases[:] = np.arange(6)
    s = ModelScorer(params, identity_features(3), identity_features(6)).scores(1)
    expected = params.item_embeddings.astype(float) @ params.user_embeddings[1].astype(float)
    np.testing.assert_allclose(s, expected + np.arange(6))
