import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cerec.ckg import InteractionSet, density
from cerec.metrics import evaluate_ranking, explanation_prf, hr_at_k, ndcg_at_k, rank_all, recall_at_k
from cerec.recommender import LatentFactors, top_k


class TestRecall:
    def test_half(self):
        assert recall_at_k([1, 9], [1, 2]) == 0.5

    def test_all(self):
        assert recall_at_k([2, 1, 7], [1, 2]) == 1.0

    def test_empty_relevant(self):
        with pytest.raises(ValueError):
            recall_at_k([1], [])


class TestNdcg:
    def test_rank_one(self):
        assert ndcg_at_k([5, 1, 2], [5]) == 1.0

    def test_rank_two(self):
        assert ndcg_at_k([1, 5, 2], [5]) == 1 / math.log2(3)
        assert ndcg_at_k([1, 5, 2], [5]) == pytest.approx(0.6309, abs=1e-4)

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            topk = rng.permutation(30)[:10].tolist()
            rel = set(rng.choice(30, size=int(rng.integers(1, 8)), replace=False).tolist())
            dcg = 0.0
            for r in range(len(topk)):
                if topk[r] in rel:
                    dcg += 1.0 / math.log2(r + 2)
            idcg = 0.0
            for r in range(min(len(rel), len(topk))):
                idcg += 1.0 / math.log2(r + 2)
            assert abs(ndcg_at_k(topk, rel) - dcg / idcg) <= 1e-12


class TestHr:
    def test_no_hit(self):
        assert hr_at_k([1, 2], [3]) == 0.0

    def test_hit(self):
        assert hr_at_k([1, 2], [2, 9]) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=10, unique=True), st.sets(st.integers(0, 20), min_size=1))
def test_metrics_bounded_and_ndcg_one_iff_top(topk, rel):
    for m in (recall_at_k, ndcg_at_k, hr_at_k):
        assert 0.0 <= m(topk, rel) <= 1.0
    top_full = all(x in rel for x in topk[:min(len(rel), len(topk))])
    assert (abs(ndcg_at_k(topk, rel) - 1.0) <= 1e-12) == top_full


class TestPrf:
    def test_closed_form(self):
        p, r, f = explanation_prf([1, 1, 0], [1, 0, 0])
        assert (p, r) == (0.5, 1.0) and f == pytest.approx(2 / 3)

    def test_exact(self):
        assert explanation_prf([0, 1, 1], [0, 1, 1]) == (1.0, 1.0, 1.0)

    def test_empty_prediction(self):
        assert explanation_prf([0, 0], [1, 0]) == (0.0, 0.0, 0.0)

    def test_empty_truth_skipped(self):
        assert explanation_prf([1, 0], [0, 0]) is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            explanation_prf([1, 0], [1, 0, 0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=20))
def test_prf_confusion_matrix_oracle(cells):
    a = [int(x) for x, _ in cells]
    o = [int(y) for _, y in cells]
    tp = sum(1 for x, y in cells if x and y)
    fp = sum(1 for x, y in cells if x and not y)
    fn = sum(1 for x, y in cells if not x and y)
    got = explanation_prf(a, o)
    if tp + fn == 0:
        assert got is None
        return
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn)
    f = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    assert got == pytest.approx((p, r, f), abs=1e-12)
    if p == 0 or r == 0:
        assert got[2] == 0.0


def test_rank_all_agrees_with_top_k():
    f = LatentFactors.random(6, 40, 4, seed=0, scale=1.0)
    f.V[5] = f.V[9]  # a tie
    excl = {u: list(range(u, 40, 7)) for u in range(6)}
    top = rank_all(f, excl, 12)
    for u in range(6):
        assert top[u].tolist() == top_k(f, u, 12, excl[u]).items.tolist()


def test_evaluate_ranking_counting_oracle():
    f = LatentFactors.random(8, 30, 4, seed=1, scale=1.0)
    rng = np.random.default_rng(1)
    test = InteractionSet.of((u, int(i)) for u in range(8) for i in rng.choice(30, 3, replace=False))
    train = InteractionSet.of((u, int(i)) for u in range(8) for i in rng.choice(30, 4, replace=False)
                              if (u, int(i)) not in test)
    rep = evaluate_ranking(f, test, train, Ks=(5, 10))
    by_test, by_train = test.by_user(), train.by_user()
    for k in (5, 10):
        rec, hits = [], []
        for u in range(8):
            order = sorted((i for i in range(30) if i not in by_train.get(u, [])), key=lambda i: (-(f.U[u] @ f.V[i]), i))[:k]
            n_hit = sum(1 for i in order if i in by_test[u])
            rec.append(n_hit / len(by_test[u]))
            hits.append(1.0 if n_hit else 0.0)
        assert rep[k]["recall"] == pytest.approx(np.mean(rec), abs=1e-12)
        assert rep[k]["hr"] == pytest.approx(np.mean(hits), abs=1e-12)
        assert rep[k]["users"] == 8


def test_density_last_fm_shape():
    d = density(3_034_796, 23_566, 48_123)
    assert round(100 * d, 3) == 0.268
