"""Explanation consistency, DNS ground truth, minimality oracle, depth sweep and reports."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import co_train, is_rational, recommendation_masks
from .ckg import CollabKG, InteractionSet
from .config import RunConfig
from .embed import GraphEmbedder
from .explain import ExplanationRecord, explain_pair, extract_attributes
from .metrics import evaluate_ranking, explanation_prf
from .recommender import LatentFactors, log_sigmoid, top_k
from .sampler import PathSampler

logger = logging.getLogger(__name__)


@dataclass
class GroundTruthSet:
    """Per-user negative attribute sets; ``vector(u, i)`` gives o_ui over all attributes."""

    n_attributes: int
    negatives: dict  # user -> sorted tuple of attribute indices

    def vector(self, u: int, i: int | None = None) -> np.ndarray:
        o = np.zeros(self.n_attributes, dtype=np.int8)
        o[list(self.negatives.get(u, ()))] = 1
        return o

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# n_attributes={self.n_attributes}\n")
            for u in sorted(self.negatives):
                f.write(f"{u}\t" + ",".join(str(p) for p in self.negatives[u]) + "\n")

    @classmethod
    def load(cls, path) -> "GroundTruthSet":
        n_attr, neg = 0, {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if line.startswith("# n_attributes="):
                    n_attr = int(line.split("=", 1)[1])
                elif line and not line.startswith("#"):
                    u, rest = line.split("\t", 1)
                    neg[int(u)] = tuple(int(p) for p in rest.split(",") if p)
        return cls(n_attr, neg)


def _bpr_step(P, Q, u, p, n, lr, reg):
    x = P[u] @ (Q[p] - Q[n])
    g = 1.0 / (1.0 + math.exp(x)) if x > -30 else 1.0  # sigma(-x)
    pu = P[u].copy()
    P[u] += lr * (g * (Q[p] - Q[n]) - reg * P[u])
    Q[p] += lr * (g * pu - reg * Q[p])
    Q[n] += lr * (-g * pu - reg * Q[n])


def dns_ground_truth(train: InteractionSet, ckg: CollabKG, config: RunConfig | None = None,
                     rounds: int | None = None, seed: int = 0, reg: float = 1e-3) -> GroundTruthSet:
    """Negative attribute preferences from a user x attribute BPR model with dynamic negatives.

    Positives are the attributes of each user's train items. The model is
    first fitted with uniformly drawn non-positive attributes; every round then
    draws a uniform candidate pool per user, promotes its highest scoring
    non-positive attributes to negatives and trains one pass on them. The
    final set of a user is everything promoted in any round.
    """
    cfg = config or RunConfig()
    rounds = cfg.dns_rounds if rounds is None else rounds
    n_u, n_p = ckg.n_users, ckg.n_attributes
    if n_p == 0:
        raise ValueError("empty attribute universe")
    negatives: dict[int, set] = {u: set() for u in range(n_u)}
    if rounds == 0:
        return GroundTruthSet(n_p, {u: () for u in range(n_u)})

    rng = np.random.default_rng(seed)
    pos = {u: set() for u in range(n_u)}
    for u, items in train.by_user().items():
        for i in items:
            pos[u].update(int(p) for p in ckg.item_attributes(i))
    pairs = [(u, p) for u in range(n_u) for p in sorted(pos[u])]
    non_pos = {u: np.asarray([p for p in range(n_p) if p not in pos[u]], dtype=np.int64) for u in range(n_u)}
    P = rng.normal(0.0, 0.1, (n_u, cfg.dns_dim))
    Q = rng.normal(0.0, 0.1, (n_p, cfg.dns_dim))

    for _ in range(cfg.dns_epochs):
        for k in rng.permutation(len(pairs)):
            u, p = pairs[k]
            if len(non_pos[u]):
                _bpr_step(P, Q, u, p, int(rng.choice(non_pos[u])), cfg.dns_lr, reg)

    for _ in range(rounds):
        promoted = {}
        for u in range(n_u):
            pool = rng.integers(0, n_p, size=cfg.dns_pool)
            pool = np.unique(pool[[p not in pos[u] for p in pool]])
            if not len(pool):
                continue
            scores = Q[pool] @ P[u]
            order = np.lexsort((pool, -scores))
            promoted[u] = pool[order[:cfg.dns_negatives]]
            negatives[u].update(int(p) for p in promoted[u])
        for k in rng.permutation(len(pairs)):
            u, p = pairs[k]
            if u in promoted:
                _bpr_step(P, Q, u, p, int(rng.choice(promoted[u])), cfg.dns_lr, reg)
    return GroundTruthSet(n_p, {u: tuple(sorted(v)) for u, v in negatives.items()})


def indicator(attrs, n_attributes: int) -> np.ndarray:
    a = np.zeros(n_attributes, dtype=np.int8)
    a[list(attrs)] = 1
    return a


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return 0.0, 0.0
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return float(x.mean()), se


def explanation_scores(pairs, truth: GroundTruthSet) -> dict:
    """Mean and standard error of precision/recall/F1 over ``(u, i, delta)`` triples.

    Pairs whose ground truth is empty are skipped.
    """
    rows = []
    for u, i, delta in pairs:
        r = explanation_prf(indicator(delta, truth.n_attributes), truth.vector(u, i))
        if r is not None:
            rows.append(r)
    arr = np.asarray(rows, dtype=float).reshape(-1, 3)
    out = {"pairs": len(rows)}
    for k, name in enumerate(("precision", "recall", "f1")):
        out[name], out[name + "_se"] = _mean_se(arr[:, k])
    return out


def random_explanations(pairs, n_attributes: int, seed: int = 0, size: int | None = None):
    """Random attribute sets for each ``(u, i, delta)``; size-matched to delta unless ``size`` is given."""
    rng = np.random.default_rng(seed)
    out = []
    for u, i, delta in pairs:
        k = min(len(delta) if size is None else size, n_attributes)
        out.append((u, i, tuple(sorted(int(p) for p in rng.choice(n_attributes, size=k, replace=False)))))
    return out


@dataclass
class OracleResult:
    attributes: frozenset
    size: int
    item: int | None
    flagged: bool
    reason: str = ""
    examined: int = 0


def reachable_items(ckg: CollabKG, i: int, hops: int = 2) -> set[int]:
    """Items reachable from ``i`` through item-attribute-item paths of total length ``hops``."""
    frontier, seen = {int(i)}, set()
    for _ in range(max(hops // 2, 1)):
        nxt = set()
        for x in frontier:
            for p in ckg.item_attributes(x):
                nxt.update(int(j) for j in ckg.attribute_items(p))
        seen |= nxt
        frontier = nxt
    return seen


def brute_force_min_counterfactual(u: int, i: int, factors: LatentFactors, ckg: CollabKG,
                                   budget: int = 1 << 20, K: int = 20, hops: int = 2) -> OracleResult:
    """Smallest non-empty attribute set S such that some rational item j outside Q_u has delta S.

    Subsets of the candidates' attribute universe are enumerated by increasing
    size; ``budget`` caps the number of subsets examined.
    """
    rec = top_k(factors, u, K)
    in_q = set(int(x) for x in rec.items)
    by_delta: dict[frozenset, int] = {}
    for j in sorted(reachable_items(ckg, i, hops)):
        if j == i or j in in_q:
            continue
        delta = frozenset(extract_attributes(ckg, i, j))
        if delta and delta not in by_delta and is_rational(factors, u, rec, i, j):
            by_delta[delta] = j
    universe = sorted(set().union(*by_delta)) if by_delta else []
    if len(universe) > 20:
        raise ValueError(f"attribute universe of {len(universe)} exceeds 20")
    examined = 0
    for size in range(1, len(universe) + 1):
        for combo in itertools.combinations(universe, size):
            examined += 1
            if examined > budget:
                return OracleResult(frozenset(), 0, None, True, "budget exceeded", examined - 1)
            s = frozenset(combo)
            if s in by_delta:
                return OracleResult(s, size, by_delta[s], False, "", examined)
    return OracleResult(frozenset(), 0, None, True, "no rational counterfactual", examined)


def audit_minimality(records, factors: LatentFactors, ckg: CollabKG, K: int = 20, hops: int = 2,
                     budget: int = 1 << 20) -> list[dict]:
    """Compare emitted |delta| with the oracle for records whose item is rational and in range."""
    rows = []
    for r in records:
        rec = top_k(factors, r.user, K)
        j = r.counterfactual_item
        covered = (j not in set(int(x) for x in rec.items)
                   and j in reachable_items(ckg, r.item, hops)
                   and is_rational(factors, r.user, rec, r.item, j))
        row = {"user": r.user, "item": r.item, "counterfactual_item": j, "delta_size": r.delta_size,
               "covered": bool(covered)}
        if covered:
            res = brute_force_min_counterfactual(r.user, r.item, factors, ckg, budget, K, hops)
            row.update(oracle_size=res.size, flagged=res.flagged,
                       ok=bool(not res.flagged and res.size <= r.delta_size))
        else:
            row.update(oracle_size=None, flagged=False, ok=True)
        rows.append(row)
    return rows


@dataclass
class MetricReport:
    ranking: dict = field(default_factory=dict)  # K -> {recall, ndcg, hr, users}
    explanation: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def check_bounds(self) -> bool:
        vals = [v for row in self.ranking.values() for k, v in row.items() if k != "users"]
        vals += [v for k, v in self.explanation.items() if k in ("precision", "recall", "f1")]
        return all(0.0 <= v <= 1.0 and not math.isnan(v) for v in vals)

    def to_json(self) -> dict:
        return {"ranking": {str(k): v for k, v in sorted(self.ranking.items())},
                "explanation": self.explanation, "config": self.config, "extra": self.extra}

    def rows(self) -> list[tuple]:
        out = []
        for k, row in sorted(self.ranking.items()):
            for m in ("recall", "ndcg", "hr"):
                out.append((m, k, row[m], ""))
        for m in ("precision", "recall", "f1"):
            if m in self.explanation:
                out.append(("explanation_" + m, "", self.explanation[m], self.explanation.get(m + "_se", "")))
        return out


def write_reports(reports, jsonl_path=None, csv_path=None, meta: dict | None = None) -> None:
    if jsonl_path:
        with open(jsonl_path, "w", encoding="utf-8") as f:
            for r in reports:
                f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            if meta:
                f.write("# cerec " + json.dumps(meta, sort_keys=True) + "\n")
            w = csv.writer(f)
            w.writerow(["report", "T", "metric", "K", "value", "se"])
            for n, r in enumerate(reports):
                for row in r.rows():
                    w.writerow([n, r.config.get("T", "")] + list(row))


def write_reward_curve(log: list[dict], path, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(header)
        f.write("epoch\tmean_reward\tcumulative_reward\tvalid_recall\n")
        for e in log:
            f.write(f"{e['epoch']}\t{e['mean_reward']:.6f}\t{e['cumulative_reward']:.6f}\t{e['valid_recall']:.6f}\n")


def quartile_trend(values) -> tuple[float, float]:
    """Mean of the first and last quarter of a curve (at least one point each)."""
    v = np.asarray(values, dtype=float)
    q = max(len(v) // 4, 1)
    return float(v[:q].mean()), float(v[-q:].mean())


def explain_interactions(pairs, ckg: CollabKG, glm, factors: LatentFactors, train: InteractionSet,
                         cfg: RunConfig, names: dict | None = None) -> list[ExplanationRecord]:
    """Greedy explanations with frozen parameters for every ``(u, i)`` in ``pairs``."""
    emb, _ = GraphEmbedder(ckg).forward(glm)
    sampler = PathSampler(ckg, emb, cfg.leaky_slope)
    rec, masks = recommendation_masks(factors, train.by_user(), cfg.K, cfg.mask_observed)
    out = []
    for u, i in pairs:
        r = explain_pair(u, i, ckg, sampler, factors, rec[u], masks[u], cfg.T, cfg.gamma, names)
        if r is not None:
            out.append(r)
    return out


def evaluate_run(ckg: CollabKG, train, valid, test, factors, glm, cfg: RunConfig,
                 truth: GroundTruthSet | None = None, Ks=(20,)) -> MetricReport:
    """Test ranking metrics and, when ground truth is given, explanation consistency on test pairs."""
    exclude = InteractionSet.of(list(train.pairs) + list(valid.pairs)) if cfg.exclude_train_at_eval else None
    report = MetricReport(ranking=evaluate_ranking(factors, test, exclude, Ks), config=cfg.to_dict())
    if truth is not None:
        recs = explain_interactions(sorted(test.pairs), ckg, glm, factors, train, cfg)
        triples = [(r.user, r.item, r.delta) for r in recs]
        report.explanation = explanation_scores(triples, truth)
        report.extra["random_baseline"] = explanation_scores(
            random_explanations(triples, ckg.n_attributes, cfg.seed), truth)
        report.extra["mean_delta_size"] = float(np.mean([r.delta_size for r in recs])) if recs else 0.0
    return report


def depth_sweep(ckg: CollabKG, train, valid, test, config: RunConfig, Ts=(1, 2, 3, 4, 5),
                truth: GroundTruthSet | None = None, Ks=(20,)) -> list[MetricReport]:
    """One co-training run and report per depth T, all with the same seed."""
    reports = []
    for T in Ts:
        cfg = config.replace(T=int(T)).validate()
        res = co_train(ckg, train, valid, cfg)
        rep = evaluate_run(ckg, train, valid, test, res.factors, res.policy.glm, cfg, truth, Ks)
        rep.extra["best_epoch"] = res.best_epoch
        rep.extra["reward_curve"] = [e["cumulative_reward"] for e in res.log]
        reports.append(rep)
    return reports
