"""CliMF-style latent factor recommender.

Scores are plain dot products. Training ascends the smoothed reciprocal-rank
lower bound ``ln s(f_ui) + ln(1 - s(f_uj - f_ui))`` with one negative ``j`` per
positive, where ``s`` is the logistic sigmoid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .ckg import InteractionSet

logger = logging.getLogger(__name__)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


@dataclass
class LatentFactors:
    U: np.ndarray  # (M, d)
    V: np.ndarray  # (N, d)
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.U.shape[1]

    @property
    def n_users(self) -> int:
        return self.U.shape[0]

    @property
    def n_items(self) -> int:
        return self.V.shape[0]

    def copy(self) -> "LatentFactors":
        return LatentFactors(self.U.copy(), self.V.copy(), self.seed)

    @classmethod
    def random(cls, n_users: int, n_items: int, dim: int = 64, seed: int = 0,
               scale: float = 0.1) -> "LatentFactors":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, (n_users, dim)), rng.normal(0.0, scale, (n_items, dim)), seed)

    def save_tsv(self, path, meta: str | None = None) -> None:
        """Text checkpoint; 17 significant digits round-trip float64 exactly."""
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# M={self.n_users}\tN={self.n_items}\td={self.dim}\tseed={self.seed}\n")
            if meta:
                f.write(f"# {meta}\n")
            for tag, mat in (("U", self.U), ("V", self.V)):
                for r, row in enumerate(mat):
                    f.write(f"{tag}\t{r}\t" + "\t".join(f"{x:.17g}" for x in row) + "\n")

    @classmethod
    def load_tsv(cls, path) -> "LatentFactors":
        with open(path, encoding="utf-8") as f:
            header = f.readline()
            meta = dict(kv.split("=") for kv in header[1:].split())
            m, n, d = int(meta["M"]), int(meta["N"]), int(meta["d"])
            U, V = np.zeros((m, d)), np.zeros((n, d))
            for line in f:
                if not line.strip() or line.startswith("#"):
                    continue
                tag, r, *vals = line.rstrip("\n").split("\t")
                (U if tag == "U" else V)[int(r)] = [float(v) for v in vals]
        return cls(U, V, int(meta["seed"]))


@dataclass
class RecList:
    user: int
    items: np.ndarray
    scores: np.ndarray

    @property
    def kth(self) -> int:
        return int(self.items[-1])

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, item) -> bool:
        return bool(np.any(self.items == item))


def predict_score(factors: LatentFactors, u: int, i) -> float | np.ndarray:
    if not 0 <= u < factors.n_users:
        raise IndexError(f"user {u} out of range")
    i = np.asarray(i)
    if np.any((i < 0) | (i >= factors.n_items)):
        raise IndexError(f"item {i} out of range")
    s = factors.V[i] @ factors.U[u]
    return float(s) if s.ndim == 0 else s


def top_k(factors: LatentFactors, u: int, K: int, exclusions=()) -> RecList:
    """K highest scoring items not in ``exclusions``; ties go to the lower id."""
    scores = factors.V @ factors.U[u]
    allowed = np.ones(factors.n_items, dtype=bool)
    excl = np.fromiter((int(x) for x in exclusions), dtype=np.int64)
    allowed[excl] = False
    cand = np.flatnonzero(allowed)
    if K > len(cand):
        raise ValueError(f"K={K} exceeds {len(cand)} available items")
    order = np.lexsort((cand, -scores[cand]))[:K]
    items = cand[order]
    return RecList(u, items, scores[items])


def rank_probs(factors: LatentFactors, u: int, candidates) -> np.ndarray:
    """Softmax of scores over ``candidates`` (max-subtracted)."""
    candidates = np.asarray(candidates)
    if candidates.size == 0:
        raise ValueError("empty candidate list")
    s = factors.V[candidates] @ factors.U[u]
    e = np.exp(s - s.max())
    return e / e.sum()


def rank_score(factors: LatentFactors, u: int, candidates, i: int) -> float:
    candidates = np.asarray(candidates)
    hit = np.flatnonzero(candidates == i)
    if hit.size == 0:
        raise ValueError(f"item {i} not among candidates")
    return float(rank_probs(factors, u, candidates)[hit[0]])


def pair_objective(s_pos, s_neg):
    return log_sigmoid(s_pos) + log_sigmoid(s_pos - s_neg)


def mrr_objective(factors: LatentFactors, batch, negatives: dict) -> float:
    """Sum over the batch of the CliMF lower bound (to be maximised)."""
    total = 0.0
    for u, i in batch:
        js = negatives[(u, i)]
        js = [js] if np.isscalar(js) else list(js)
        s_i = factors.U[u] @ factors.V[i]
        total += float(log_sigmoid(s_i))
        for j in js:
            total += float(log_sigmoid(s_i - factors.U[u] @ factors.V[j]))
    return total


def pair_gradients(U_u, V_i, V_j, reg: float = 0.0):
    """Closed-form ascent direction of the per-example objective.

    Objective: ln s(U.V_i) + ln(1 - s(U.V_j - U.V_i)) - reg(|U|^2 + |V_i|^2 + |V_j|^2).
    Returns gradients with respect to (U_u, V_i, V_j).
    """
    s_i = U_u @ V_i
    s_j = U_u @ V_j
    a = expit(-s_i)  # d ln s(s_i) / d s_i
    b = expit(s_j - s_i)  # -d ln(1 - s(s_j - s_i)) / d s_j
    g_u = (a + b) * V_i - b * V_j - 2.0 * reg * U_u
    g_i = (a + b) * U_u - 2.0 * reg * V_i
    g_j = -b * U_u - 2.0 * reg * V_j
    return g_u, g_i, g_j


def sgd_step(factors: LatentFactors, u: int, i: int, j: int, lr: float = 0.01,
             reg: float = 1e-4) -> LatentFactors:
    """One in-place ascent step on (u, i, j); returns ``factors``."""
    if i == j:
        raise ValueError("positive and negative item must differ")
    g_u, g_i, g_j = pair_gradients(factors.U[u], factors.V[i], factors.V[j], reg)
    factors.U[u] += lr * g_u
    factors.V[i] += lr * g_i
    factors.V[j] += lr * g_j
    return factors


class UniformNegativeSampler:
    """Draws unobserved items uniformly per user (rejection sampling)."""

    def __init__(self, train: InteractionSet, n_items: int):
        self.n_items = n_items
        self.observed = {u: set(items) for u, items in train.by_user().items()}

    def sample(self, u: int, rng: np.random.Generator) -> int | None:
        obs = self.observed.get(u, ())
        if len(obs) >= self.n_items:
            return None
        while True:
            j = int(rng.integers(self.n_items))
            if j not in obs:
                return j


def init_with_uniform_negatives(factors: LatentFactors, train: InteractionSet, steps: int,
                                seed: int = 0, lr: float = 0.01, reg: float = 1e-4) -> LatentFactors:
    """Run ``steps`` SGD updates cycling over shuffled positives."""
    if steps <= 0:
        return factors
    if len(train) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    sampler = UniformNegativeSampler(train, factors.n_items)
    pairs = list(train)
    done = 0
    skipped = 0
    while done < steps:
        for k in rng.permutation(len(pairs)):
            if done >= steps:
                break
            u, i = pairs[k]
            j = sampler.sample(u, rng)
            done += 1
            if j is None:
                skipped += 1
                continue
            sgd_step(factors, u, i, j, lr, reg)
    if skipped:
        logger.info("skipped %d steps for users who observed every item", skipped)
    return factors
