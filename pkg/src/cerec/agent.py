"""Counterfactual MDP, REINFORCE and the recommender/policy co-training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ckg import CollabKG, InteractionSet
from .config import RunConfig
from .embed import EmbeddingTable, ForwardCache, GlmParams, GraphEmbedder, init_params
from .metrics import fast_recall
from .recommender import (
    LatentFactors,
    RecList,
    UniformNegativeSampler,
    init_with_uniform_negatives,
    sgd_step,
    top_k,
)
from .sampler import Action, DeadEndError, PathSampler, State

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepRecord:
    state: State
    action: Action
    reward: float
    log_prob: float


@dataclass
class Trajectory:
    origin: tuple[int, int]
    gamma: float
    depth: int
    steps: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class PolicyParams:
    glm: GlmParams
    baseline: float | None = None  # running reward mean when the baseline is enabled


def _probs_over(factors: LatentFactors, u: int, rec_list: RecList, extra) -> dict[int, float]:
    """Softmax ranking probabilities over the list plus ``extra``, for ``extra`` and the K-th item."""
    q_items = rec_list.items
    scores = [np.asarray(rec_list.scores, dtype=float)]
    wanted = {}
    for x in extra:
        x = int(x)
        if x in wanted:
            continue
        hit = np.flatnonzero(q_items == x)
        if hit.size:
            wanted[x] = float(rec_list.scores[hit[0]])
        else:
            wanted[x] = float(factors.V[x] @ factors.U[u])
            scores.append(np.asarray([wanted[x]]))
    wanted.setdefault(int(rec_list.kth), float(rec_list.scores[-1]))
    s = np.concatenate(scores)
    m = s.max()
    z = np.exp(s - m).sum()
    return {x: math.exp(v - m) / z for x, v in wanted.items()}


def epsilon_threshold(factors: LatentFactors, u: int, rec_list: RecList, e_t: int) -> float:
    """P_u(e_t) - P_u(K-th item), softmax over the list plus e_t."""
    p = _probs_over(factors, u, rec_list, [e_t])
    return p[int(e_t)] - p[int(rec_list.kth)]


def is_rational(factors: LatentFactors, u: int, rec_list: RecList, e_t: int, e_next: int,
                eps: float | None = None) -> bool:
    if eps is None:
        eps = epsilon_threshold(factors, u, rec_list, e_t)
    p = _probs_over(factors, u, rec_list, [e_t, e_next])
    return p[int(e_t)] - p[int(e_next)] >= eps


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        logger.debug("zero-norm embedding in cosine; using 0")
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def reward(state: State, action: Action, factors: LatentFactors, rec_list: RecList,
           emb: EmbeddingTable, eps: float | None = None) -> float:
    """Similarity plus a unit bonus when the proposal clears the rationality margin."""
    c = cosine(emb.item(state.current_item), emb.item(action.next_item))
    if is_rational(factors, state.user, rec_list, state.current_item, action.next_item, eps):
        return 1.0 + c
    return c


def rollout(u: int, i: int, T: int, gamma: float, sampler: PathSampler, factors: LatentFactors,
            rec_list: RecList, mask: np.ndarray, rng: np.random.Generator,
            greedy: bool = False) -> Trajectory:
    """Up to T path-actions from (u, i); a dead end truncates the episode."""
    traj = Trajectory((u, i), gamma, T)
    state = State(u, i)
    for t in range(T):
        try:
            action = sampler.greedy(state, mask) if greedy else sampler.sample(state, mask, rng)
        except DeadEndError:
            if t == 0:
                logger.debug("dead end at the origin of (%d, %d)", u, i)
            break
        eps = epsilon_threshold(factors, u, rec_list, state.current_item)
        r = reward(state, action, factors, rec_list, sampler.emb, eps)
        traj.steps.append(StepRecord(state, action, r, action.log_prob))
        state = State(u, action.next_item)
    return traj


def discounted_return(traj: Trajectory) -> float:
    return float(sum(traj.gamma ** t * s.reward for t, s in enumerate(traj.steps)))


def add_reinforce_upstream(traj: Trajectory, sampler: PathSampler, mask: np.ndarray, out: np.ndarray,
                           baseline: float = 0.0, scale: float = 1.0) -> None:
    """Accumulate the REINFORCE estimator's gradient on the embedding table into ``out``."""
    for t, step in enumerate(traj.steps):
        w = scale * traj.gamma ** t * (step.reward - baseline) / traj.depth
        if w != 0.0:
            sampler.add_log_prob_grad(step.state, step.action, mask, out, w)


def reinforce_grad(traj: Trajectory, policy: PolicyParams, embedder: GraphEmbedder,
                   cache: ForwardCache, sampler: PathSampler, mask: np.ndarray,
                   baseline: float = 0.0) -> GlmParams:
    """(1/T) sum_t gamma^t (r_t - b) grad log P(a_t | s_t) on all GLM parameters."""
    upstream = np.zeros_like(sampler.emb.vectors)
    add_reinforce_upstream(traj, sampler, mask, upstream, baseline)
    return embedder.backward(cache, policy.glm, upstream)


def select_counterfactual(traj: Trajectory) -> int | None:
    if not traj.steps:
        return None
    best = max(range(len(traj.steps)), key=lambda t: (traj.steps[t].reward, -t))
    return traj.steps[best].action.next_item


def ranked_counterfactuals(traj: Trajectory) -> list[int]:
    """Distinct proposals ordered by reward (desc), earlier step first on ties."""
    order = sorted(range(len(traj.steps)), key=lambda t: (-traj.steps[t].reward, t))
    out = []
    for t in order:
        j = traj.steps[t].action.next_item
        if j not in out:
            out.append(j)
    return out


class Adam:
    def __init__(self, params: GlmParams, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def ascend(self, params: GlmParams, grads: GlmParams) -> None:
        self.t += 1
        for a, g, m, v in zip(params.arrays(), grads.arrays(), self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            a += self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        out = {f"m{k}": m for k, m in enumerate(self.m)}
        out.update({f"v{k}": v for k, v in enumerate(self.v)})
        out["t"] = np.asarray(self.t)
        return out

    def load(self, z) -> None:
        self.m = [z[f"m{k}"].copy() for k in range(len(self.m))]
        self.v = [z[f"v{k}"].copy() for k in range(len(self.v))]
        self.t = int(z["t"])


class Sgd:
    def __init__(self, params: GlmParams, lr: float):
        self.lr = lr

    def ascend(self, params: GlmParams, grads: GlmParams) -> None:
        for a, g in zip(params.arrays(), grads.arrays()):
            a += self.lr * g

    def state(self) -> dict:
        return {}

    def load(self, z) -> None:
        pass


@dataclass
class TrainResult:
    factors: LatentFactors
    policy: PolicyParams
    log: list
    best_epoch: int = -1


def recommendation_masks(factors: LatentFactors, train_by_user: dict, K: int,
                         include_observed: bool = True) -> tuple[dict, dict]:
    """Per-user Top-K lists and sampler masks (list, optionally plus train items)."""
    rec, masks = {}, {}
    for u in range(factors.n_users):
        rl = top_k(factors, u, K)
        rec[u] = rl
        m = np.zeros(factors.n_items, dtype=bool)
        m[rl.items] = True
        if include_observed:
            m[train_by_user.get(u, [])] = True
        masks[u] = m
    return rec, masks


def co_train(ckg: CollabKG, train: InteractionSet, valid: InteractionSet, config: RunConfig,
             seed: int | None = None, out_dir: str | Path | None = None, resume: bool = False,
             on_epoch=None) -> TrainResult:
    """Alternate policy rollouts/updates with recommender SGD on counterfactual negatives.

    ``train`` and ``valid`` use dense ids of ``ckg``. With ``config.negatives ==
    "uniform"`` the policy is skipped and every negative is drawn uniformly,
    which is the matched baseline.
    """
    cfg = config
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    train_by_user = train.by_user()
    train_sets = {u: set(v) for u, v in train_by_user.items()}
    valid_by_user = valid.by_user()
    pairs = list(train)
    uniform = UniformNegativeSampler(train, ckg.n_items)

    factors = LatentFactors.random(ckg.n_users, ckg.n_items, cfg.d, seed, cfg.factor_init_scale)
    init_with_uniform_negatives(factors, train, cfg.init_epochs * len(pairs), seed, cfg.lr, cfg.reg)
    glm = init_params(ckg.n_entities, cfg.dims, seed + 1, cfg.leaky_slope, cfg.init_scale)
    policy = PolicyParams(glm, 0.0 if cfg.baseline_on else None)
    opt = (Adam if cfg.policy_optimizer == "adam" else Sgd)(glm, cfg.lr_policy)
    embedder = GraphEmbedder(ckg)
    use_policy = cfg.negatives == "policy"

    log: list[dict] = []
    best = (-1.0, -1, factors.copy(), glm.copy())
    stale = 0
    start_epoch = 0
    ckpt = Path(out_dir) if out_dir else None
    if ckpt and resume and (ckpt / "state.json").exists():
        factors, glm, opt, log, best, stale, start_epoch, rng = _load_checkpoint(ckpt, opt, cfg)
        policy = PolicyParams(glm, policy.baseline)
        if log and "baseline" in log[-1] and policy.baseline is not None:
            policy.baseline = log[-1]["baseline"]

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        rec, masks = recommendation_masks(factors, train_by_user, cfg.K, cfg.mask_observed)
        if use_policy:
            emb, cache = embedder.forward(glm)
            sampler = PathSampler(ckg, emb, cfg.leaky_slope)
            upstream = np.zeros_like(emb.vectors)
        n_batch = 0
        rewards, returns, fallbacks = [], [], 0
        for k in rng.permutation(len(pairs)):
            u, i = pairs[k]
            j = None
            if use_policy:
                traj = rollout(u, i, cfg.T, cfg.gamma, sampler, factors, rec[u], masks[u], rng)
                if traj.steps:
                    b = policy.baseline if policy.baseline is not None else 0.0
                    add_reinforce_upstream(traj, sampler, masks[u], upstream, b)
                    rewards.extend(s.reward for s in traj.steps)
                    returns.append(discounted_return(traj))
                    if policy.baseline is not None:
                        mean_r = float(np.mean([s.reward for s in traj.steps]))
                        policy.baseline = cfg.baseline_decay * policy.baseline + (1 - cfg.baseline_decay) * mean_r
                    # an observed positive cannot serve as the negative (possible without observed masking)
                    observed = train_sets[u]
                    j = next((x for x in ranked_counterfactuals(traj) if x not in observed), None)
                n_batch += 1
                if n_batch == cfg.policy_batch:
                    _policy_update(embedder, cache, glm, opt, upstream / n_batch)
                    emb, cache = embedder.forward(glm)
                    sampler = PathSampler(ckg, emb, cfg.leaky_slope)
                    upstream[...] = 0.0
                    n_batch = 0
            if j is None:
                if use_policy:
                    fallbacks += 1
                j = uniform.sample(u, rng)
                if j is None:
                    continue
            sgd_step(factors, u, i, j, cfg.lr, cfg.reg)
        if use_policy and n_batch:
            _policy_update(embedder, cache, glm, opt, upstream / n_batch)

        val = fast_recall(factors, valid_by_user, train_by_user if cfg.exclude_train_at_eval else None, cfg.eval_k)
        rec_entry = {
            "epoch": epoch,
            "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
            "cumulative_reward": float(np.mean(returns)) if returns else 0.0,
            "valid_recall": val,
            "fallbacks": fallbacks,
            "wall_time": round(time.perf_counter() - t0, 6),
        }
        if policy.baseline is not None:
            rec_entry["baseline"] = policy.baseline
        log.append(rec_entry)
        if fallbacks:
            logger.info("epoch %d: %d positives fell back to uniform negatives", epoch, fallbacks)
        if val > best[0]:
            best = (val, epoch, factors.copy(), glm.copy())
            stale = 0
        else:
            stale += 1
        if ckpt:
            _save_checkpoint(ckpt, factors, glm, opt, log, best, stale, epoch + 1, rng)
        if on_epoch:
            on_epoch(rec_entry)
        if stale >= cfg.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best[1])
            break

    if best[1] >= 0:
        factors, glm = best[2], best[3]
    return TrainResult(factors, PolicyParams(glm, policy.baseline), log, best[1])


def _policy_update(embedder: GraphEmbedder, cache: ForwardCache, glm: GlmParams, opt, upstream: np.ndarray) -> None:
    if not np.any(upstream):
        return
    grads = embedder.backward(cache, glm, upstream)
    opt.ascend(glm, grads)


def _save_checkpoint(d: Path, factors, glm, opt, log, best, stale, next_epoch, rng) -> None:
    d.mkdir(parents=True, exist_ok=True)
    factors.save_tsv(d / "factors.tsv")
    glm.save(d / "policy.npz")
    best[2].save_tsv(d / "factors_best.tsv")
    best[3].save(d / "policy_best.npz")
    np.savez(d / "optimizer.npz", **opt.state())
    state = {
        "next_epoch": next_epoch,
        "best_recall": best[0],
        "best_epoch": best[1],
        "stale": stale,
        "rng": rng.bit_generator.state,
        "log": log,
    }
    tmp = d / "state.json.tmp"
    tmp.write_text(json.dumps(state))
    tmp.replace(d / "state.json")


def _load_checkpoint(d: Path, opt, cfg: RunConfig):
    state = json.loads((d / "state.json").read_text())
    factors = LatentFactors.load_tsv(d / "factors.tsv")
    glm = GlmParams.load(d / "policy.npz")
    opt = (Adam if cfg.policy_optimizer == "adam" else Sgd)(glm, cfg.lr_policy)
    with np.load(d / "optimizer.npz") as z:
        if len(z.files):
            opt.load(z)
    best = (state["best_recall"], state["best_epoch"],
            LatentFactors.load_tsv(d / "factors_best.tsv"), GlmParams.load(d / "policy_best.npz"))
    rng = np.random.default_rng()
    rng.bit_generator.state = state["rng"]
    return factors, glm, opt, state["log"], best, state["stale"], state["next_epoch"], rng
