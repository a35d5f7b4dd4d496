import csv
import json

import numpy as np
import pytest

from cerec.agent import reward
from cerec.ckg import split_interactions
from cerec.config import load_config
from cerec.evaluation import (
    GroundTruthSet,
    MetricReport,
    audit_minimality,
    brute_force_min_counterfactual,
    depth_sweep,
    dns_ground_truth,
    explanation_scores,
    quartile_trend,
    random_explanations,
    reachable_items,
    write_reports,
    write_reward_curve,
)
from cerec.explain import ExplanationRecord
from cerec.oracle import check_minimality
from cerec.pipeline import prepare_dataset
from cerec.recommender import LatentFactors, top_k
from cerec.sampler import Action, State
from cerec.synth import make_planted

from conftest import make_graph, table

CONFIG = "configs/synthetic.conf"


def factors_1d(scores):
    return LatentFactors(np.ones((1, 1)), np.asarray(scores, dtype=float)[:, None])


@pytest.fixture(scope="module")
def planted():
    out = []
    cfg = load_config(CONFIG)
    for seed in range(5):
        data = make_planted({}, seed=seed)
        out.append((data, prepare_dataset(data.interactions, data.triples, data.alignment, cfg, seed=seed), cfg))
    return out


class TestDns:
    def test_zero_rounds(self, small):
        gt = dns_ground_truth(small.train, small.ckg, rounds=0)
        assert all(not gt.vector(u).any() for u in range(small.ckg.n_users))

    def test_deterministic(self, small):
        a = dns_ground_truth(small.train, small.ckg, rounds=3, seed=5)
        b = dns_ground_truth(small.train, small.ckg, rounds=3, seed=5)
        assert a.negatives == b.negatives

    def test_never_marks_positive_attributes(self, small):
        gt = dns_ground_truth(small.train, small.ckg, rounds=5, seed=1)
        for u, items in small.train.by_user().items():
            pos = {int(p) for i in items for p in small.ckg.item_attributes(i)}
            assert not pos & set(gt.negatives[u])

    def test_save_load(self, small, tmp_path):
        gt = dns_ground_truth(small.train, small.ckg, rounds=2, seed=0)
        gt.save(tmp_path / "gt.tsv")
        back = GroundTruthSet.load(tmp_path / "gt.tsv")
        assert back.n_attributes == gt.n_attributes
        assert {u: v for u, v in back.negatives.items() if v} == {u: v for u, v in gt.negatives.items() if v}

    def test_planted_recovery(self, planted):
        for data, ds, cfg in planted:
            gt = dns_ground_truth(ds.train, ds.ckg, cfg, seed=cfg.seed)
            found = 0
            for k, u in enumerate(ds.ckg.user_ids):
                want = {ds.ckg.attribute_index(p) for p in data.disliked[int(u)]}
                found += want <= set(gt.negatives[k])
            assert found / ds.ckg.n_users >= 0.8


class TestScores:
    def test_explanation_scores(self):
        gt = GroundTruthSet(4, {0: (1,), 1: (), 2: (0, 3)})
        out = explanation_scores([(0, 0, (1, 2)), (1, 0, (1,)), (2, 0, (0, 3))], gt)
        assert out["pairs"] == 2
        assert out["precision"] == pytest.approx(0.75) and out["recall"] == pytest.approx(1.0)
        assert out["f1"] == pytest.approx((2 / 3 + 1) / 2)

    def test_random_size_matched(self):
        pairs = [(0, 0, (1, 2, 3)), (1, 1, (4,))]
        out = random_explanations(pairs, 10, seed=0)
        assert [len(d) for _, _, d in out] == [3, 1]
        assert random_explanations(pairs, 10, seed=0) == out
        assert [len(d) for _, _, d in random_explanations(pairs, 10, seed=0, size=10)] == [10, 10]


def oracle_graph():
    # i = 0 has {a, b}; item 1 differs by one attribute, item 2 by two; item 3 is the top pick
    return make_graph({0: [20, 21], 1: [20, 22], 2: [21, 23, 24], 3: [20]})


class TestBruteForce:
    def test_one_attribute_flip(self):
        ckg = oracle_graph()
        f = factors_1d([1.0, -2.0, -3.0, 5.0])
        res = brute_force_min_counterfactual(0, 0, f, ckg, K=1)
        assert (res.size, res.item, res.flagged) == (1, 1, False)
        assert res.attributes == {ckg.attribute_index(22)}
        emb = table(ckg, np.random.default_rng(0).normal(size=(ckg.n_entities, 3)))
        rl = top_k(f, 0, 1)
        r = reward(State(0, 0), Action(0, 0, 1, 0.0), f, rl, emb)
        c = emb.item(0) @ emb.item(1) / np.linalg.norm(emb.item(0)) / np.linalg.norm(emb.item(1))
        assert r == pytest.approx(1.0 + c)

    def test_infeasible_flagged(self):
        # the only item with a non-empty difference is in the list; the other shares i's attributes
        ckg = make_graph({0: [20, 21], 1: [20, 22], 2: [20]})
        f = factors_1d([1.0, 5.0, -1.0])
        res = brute_force_min_counterfactual(0, 0, f, ckg, K=1)
        assert res.flagged and res.size == 0 and res.item is None

    def test_budget_flagged(self):
        ckg = make_graph({0: [20], 1: [20, 21, 22], 2: [30]})
        f = factors_1d([1.0, -1.0, 5.0])
        res = brute_force_min_counterfactual(0, 0, f, ckg, budget=1, K=1)
        assert res.flagged and res.reason == "budget exceeded"
        full = brute_force_min_counterfactual(0, 0, f, ckg, K=1)
        assert full.size == 2 and not full.flagged

    def test_universe_limit(self):
        ckg = make_graph({0: [20], 1: [20] + list(range(100, 121)), 2: [30]})
        with pytest.raises(ValueError):
            brute_force_min_counterfactual(0, 0, factors_1d([1.0, -1.0, 5.0]), ckg, K=1)

    def test_reachable(self):
        ckg = oracle_graph()
        assert reachable_items(ckg, 0, 2) == {0, 1, 2, 3}
        assert reachable_items(make_graph({0: [20], 1: [21]}), 0, 2) == {0}

    def test_audit_detects_violation(self):
        ckg = oracle_graph()
        f = factors_1d([1.0, -2.0, -3.0, 5.0])
        good = ExplanationRecord(0, 0, 2, (0, 1), "")
        bad = ExplanationRecord(0, 0, 1, (), "")
        rows = audit_minimality([good, bad], f, ckg, K=1)
        assert rows[0]["covered"] and rows[0]["ok"] and rows[0]["oracle_size"] == 1
        assert rows[1]["covered"] and not rows[1]["ok"]

    @pytest.mark.parametrize("name", ["tiny", "small"])
    def test_audit_inequality_on_fixtures(self, name, tiny, small):
        fx = tiny if name == "tiny" else small
        res, rows = check_minimality(fx, seed=0)
        assert res.passed, res.line()
        for r in rows:
            if r["covered"]:
                assert r["oracle_size"] <= r["delta_size"]


class TestReports:
    def test_bounds(self):
        assert MetricReport(ranking={20: {"recall": 0.3, "ndcg": 0.2, "hr": 1.0, "users": 4}}).check_bounds()
        assert not MetricReport(explanation={"f1": 1.5}).check_bounds()

    def test_write(self, tmp_path):
        rep = MetricReport(ranking={20: {"recall": 0.3, "ndcg": 0.2, "hr": 1.0, "users": 4},
                                    40: {"recall": 0.4, "ndcg": 0.25, "hr": 1.0, "users": 4}},
                           explanation={"precision": 0.5, "recall": 0.4, "f1": 0.44, "f1_se": 0.01},
                           config={"T": 2})
        write_reports([rep], tmp_path / "r.jsonl", tmp_path / "r.csv", meta={"input_sha256": "x"})
        row = json.loads((tmp_path / "r.jsonl").read_text())
        assert set(row["ranking"]) == {"20", "40"}
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("# cerec ")
        body = list(csv.reader(lines[1:]))
        assert body[0] == ["report", "T", "metric", "K", "value", "se"]
        assert len(body) == 1 + 6 + 3

    def test_reward_curve(self, tmp_path):
        log = [{"epoch": e, "mean_reward": 1.0, "cumulative_reward": 2.0, "valid_recall": 0.1} for e in range(3)]
        write_reward_curve(log, tmp_path / "c.tsv", header="# h\n")
        lines = (tmp_path / "c.tsv").read_text().splitlines()
        assert lines[1].split("\t") == ["epoch", "mean_reward", "cumulative_reward", "valid_recall"]
        assert len(lines) == 5

    def test_quartile_trend(self):
        assert quartile_trend([1, 2, 3, 4, 5, 6, 7, 8]) == (1.5, 7.5)
        assert quartile_trend([3.0]) == (3.0, 3.0)


class TestDepthSweep:
    def _data(self, fx):
        tr, va, te = split_interactions(fx.train, seed=0)
        return fx.ckg, tr, va, te

    def test_single_T(self, small):
        ckg, tr, va, te = self._data(small)
        reps = depth_sweep(ckg, tr, va, te, small.config.replace(epochs=1), Ts=(3,))
        assert len(reps) == 1 and reps[0].config["T"] == 3

    def test_each_report_echoes_T_and_is_bounded(self, small):
        ckg, tr, va, te = self._data(small)
        truth = dns_ground_truth(tr, ckg, rounds=3)
        reps = depth_sweep(ckg, tr, va, te, small.config.replace(epochs=1), Ts=(1, 2), truth=truth, Ks=(5,))
        assert [r.config["T"] for r in reps] == [1, 2]
        assert all(r.check_bounds() for r in reps)
        assert all("random_baseline" in r.extra for r in reps)
