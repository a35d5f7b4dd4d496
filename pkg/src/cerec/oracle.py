"""Independent checks on small fixtures: sampling, masking, gradients, minimality."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .agent import Trajectory, StepRecord, co_train, recommendation_masks, reinforce_grad, reward, PolicyParams
from .ckg import CollabKG, InteractionSet, load_alignment, load_interactions, load_triples, build_ckg, remap_interactions
from .config import RunConfig, read_kv
from .embed import GlmParams, GraphEmbedder, init_params
from .evaluation import audit_minimality, explain_interactions
from .recommender import LatentFactors, pair_objective, pair_gradients
from .sampler import DeadEndError, PathSampler, State
from .synth import read_names

FIXTURES = ("tiny", "small")


@dataclass
class Fixture:
    name: str
    ckg: CollabKG
    train: InteractionSet  # dense ids; every interaction is a training positive
    config: RunConfig
    names: dict


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3g} (tol {self.tolerance:g}) {self.detail}".rstrip()


def fixture_dir(name_or_path) -> Path:
    p = Path(str(name_or_path))
    if p.is_dir():
        return p
    if str(name_or_path) in FIXTURES:
        return Path(str(resources.files("cerec") / "fixtures" / str(name_or_path)))
    raise FileNotFoundError(f"no fixture {name_or_path!r}")


def load_fixture(name_or_path) -> Fixture:
    d = fixture_dir(name_or_path)
    inter = load_interactions(d / "interactions.tsv")
    triples = load_triples(d / "triples.tsv")
    alignment = load_alignment(d / "alignment.tsv")
    ckg = build_ckg(inter, triples, alignment)
    cfg = RunConfig(kcore=1, entity_min=1, relation_min=1)
    if (d / "fixture.conf").exists():
        cfg = cfg.with_overrides(read_kv(d / "fixture.conf"))
    cfg.validate()
    names = read_names(d / "names.tsv") if (d / "names.tsv").exists() else {}
    return Fixture(d.name, ckg, remap_interactions(ckg, inter), cfg, names)


def fixture_model(fx: Fixture, seed: int = 0, scale: float = 1.0):
    """Random factors and GLM parameters at the fixture's widths.

    The GLM init is larger than the training default so attention scores
    are far from uniform and the checks are not trivially satisfied.
    """
    cfg = fx.config
    factors = LatentFactors.random(fx.ckg.n_users, fx.ckg.n_items, cfg.d, seed, 1.0)
    glm = init_params(fx.ckg.n_entities, cfg.dims, seed + 1, cfg.leaky_slope, scale)
    return factors, glm


def _states(fx: Fixture):
    for u, i in fx.train:
        yield State(u, i)


def check_sampler_fidelity(fx: Fixture, n_samples: int = 100_000, seed: int = 0, tol: float = 0.02) -> list[CheckResult]:
    """Empirical path frequencies against the enumerated distribution for the busiest state."""
    factors, glm = fixture_model(fx, seed)
    emb, _ = GraphEmbedder(fx.ckg).forward(glm)
    sampler = PathSampler(fx.ckg, emb, fx.config.leaky_slope)
    _, masks = recommendation_masks(factors, fx.train.by_user(), fx.config.K, False)
    best = None
    for st in _states(fx):
        try:
            paths = sampler.enumerate(st, masks[st.user])
        except DeadEndError:
            continue
        total = sum(p for _, p in paths)
        if abs(total - 1.0) > 1e-9:
            continue  # a first-hop dead end leaves mass unassigned
        if best is None or len(paths) > len(best[1]):
            best = (st, paths)
    if best is None:
        return [CheckResult("sampler_fidelity", False, math.inf, tol, "no state without dead ends")]
    st, paths = best
    rng = np.random.default_rng(seed)
    counts = Counter()
    for _ in range(n_samples):
        a = sampler.sample(st, masks[st.user], rng)
        counts[(a.attribute, a.next_item)] += 1
    exact = {(a.attribute, a.next_item): p for a, p in paths}
    keys = set(exact) | set(counts)
    l1 = sum(abs(counts.get(k, 0) / n_samples - exact.get(k, 0.0)) for k in keys)
    total = sum(exact.values())
    return [
        CheckResult("sampler_fidelity_l1", l1 <= tol, l1, tol, f"state=({st.user},{st.current_item}) paths={len(paths)}"),
        CheckResult("enumeration_sums_to_one", abs(total - 1.0) <= 1e-9, abs(total - 1.0), 1e-9),
    ]


def check_masking(fx: Fixture, seed: int = 0) -> CheckResult:
    """Every masked item has probability exactly 0 at the second hop, for every state and attribute."""
    factors, glm = fixture_model(fx, seed)
    emb, _ = GraphEmbedder(fx.ckg).forward(glm)
    sampler = PathSampler(fx.ckg, emb, fx.config.leaky_slope)
    _, masks = recommendation_masks(factors, fx.train.by_user(), fx.config.K, False)
    violations = checked = 0
    for u in range(fx.ckg.n_users):
        for i in range(fx.ckg.n_items):
            st = State(u, i)
            for p in fx.ckg.item_attributes(i):
                try:
                    items, p2 = sampler.step_two(st, int(p), masks[u])
                except DeadEndError:
                    continue
                for j, pj in zip(items, p2):
                    checked += 1
                    if masks[u][j] and pj != 0.0:
                        violations += 1
            try:
                for a, _ in sampler.enumerate(st, masks[u]):
                    checked += 1
                    if masks[u][a.next_item]:
                        violations += 1
            except DeadEndError:
                pass
    return CheckResult("masking", violations == 0, float(violations), 0.0, f"checked={checked}")


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_sgd_gradient(seed: int = 0, d: int = 3, reg: float = 0.1, h: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=3 * d)

    def f(v):
        U, Vi, Vj = v[:d], v[d:2 * d], v[2 * d:]
        return float(pair_objective(U @ Vi, U @ Vj) - reg * (U @ U + Vi @ Vi + Vj @ Vj))

    num = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(3 * d)])
    ana = np.concatenate(pair_gradients(x[:d], x[d:2 * d], x[2 * d:], reg))
    err = _rel_err(ana, num)
    return CheckResult("sgd_step_gradient", err <= 1e-4, err, 1e-4, f"params={3 * d}")


def _surrogate(glm: GlmParams, fx: Fixture, traj: Trajectory, mask: np.ndarray, baseline: float) -> float:
    emb, _ = GraphEmbedder(fx.ckg).forward(glm)
    sampler = PathSampler(fx.ckg, emb, fx.config.leaky_slope)
    return sum(traj.gamma ** t * (s.reward - baseline) * sampler.log_prob(s.state, s.action, mask)
               for t, s in enumerate(traj.steps)) / traj.depth


def check_reinforce_gradient(fx: Fixture, seed: int = 0, h: float = 1e-5, baseline: float = 0.3) -> CheckResult:
    """Analytic REINFORCE gradient against central differences of the score-function surrogate."""
    factors, glm = fixture_model(fx, seed)
    if glm.size > 100:
        raise ValueError(f"{glm.size} parameters; the check is meant for <= 100")
    embedder = GraphEmbedder(fx.ckg)
    emb, cache = embedder.forward(glm)
    sampler = PathSampler(fx.ckg, emb, fx.config.leaky_slope)
    rec, masks = recommendation_masks(factors, fx.train.by_user(), fx.config.K, False)
    rng = np.random.default_rng(seed)
    traj = None
    for st in _states(fx):
        t = Trajectory((st.user, st.current_item), fx.config.gamma, fx.config.T)
        state = st
        try:
            for _ in range(fx.config.T):
                a = sampler.sample(state, masks[st.user], rng)
                r = reward(state, a, factors, rec[st.user], emb)
                t.steps.append(StepRecord(state, a, r, a.log_prob))
                state = State(st.user, a.next_item)
        except DeadEndError:
            continue
        traj = t
        break
    if traj is None:
        return CheckResult("reinforce_gradient", False, math.inf, 1e-4, "no full-depth trajectory")
    mask = masks[traj.origin[0]]
    ana = reinforce_grad(traj, PolicyParams(glm), embedder, cache, sampler, mask, baseline).flat()
    x0 = glm.flat()
    num = np.zeros_like(x0)
    probe = glm.copy()
    for k in range(len(x0)):
        for sgn in (1.0, -1.0):
            x = x0.copy()
            x[k] += sgn * h
            probe.set_flat(x)
            num[k] += sgn * _surrogate(probe, fx, traj, mask, baseline)
        num[k] /= 2 * h
    err = _rel_err(ana, num)
    return CheckResult("reinforce_gradient", err <= 1e-4, err, 1e-4, f"params={len(x0)}")


def check_minimality(fx: Fixture, seed: int = 0, epochs: int = 3) -> tuple[CheckResult, list[dict]]:
    """Train briefly, explain every interaction, compare |delta| with the brute-force minimum."""
    cfg = fx.config.replace(epochs=epochs, seed=seed)
    res = co_train(fx.ckg, fx.train, InteractionSet(), cfg, seed=seed)
    records = explain_interactions(sorted(fx.train.pairs), fx.ckg, res.policy.glm, res.factors, fx.train, cfg)
    rows = audit_minimality(records, res.factors, fx.ckg, cfg.K, hops=2 * cfg.T)
    bad = [r for r in rows if not r["ok"]]
    covered = sum(r["covered"] for r in rows)
    return CheckResult("minimality_audit", not bad, float(len(bad)), 0.0,
                       f"records={len(rows)} audited={covered}"), rows


def run_suite(fixture, seed: int = 0, n_samples: int = 100_000) -> list[CheckResult]:
    fx = fixture if isinstance(fixture, Fixture) else load_fixture(fixture)
    out = []
    out += check_sampler_fidelity(fx, n_samples, seed)
    out.append(check_masking(fx, seed))
    out.append(check_sgd_gradient(seed))
    if fixture_model(fx, seed)[1].size <= 100:
        out.append(check_reinforce_gradient(fx, seed))
    out.append(check_minimality(fx, seed)[0])
    return out
