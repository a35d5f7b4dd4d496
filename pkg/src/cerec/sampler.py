"""Counterfactual path sampler.

An action is a 2-hop path ``item -> attribute -> item``. The first hop is a
softmax over the item's attributes, the second a softmax over the
attribute's items with the user's current recommendation list masked out.
Both scores have the form ``h_u . LeakyReLU(h_a * h_b)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ckg import CollabKG
from .embed import EmbeddingTable, leaky_relu, leaky_relu_grad


class DeadEndError(RuntimeError):
    """No admissible neighbour at one of the two hops."""


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class State:
    user: int
    current_item: int


@dataclass(frozen=True)
class Action:
    item: int
    attribute: int
    next_item: int
    log_prob: float
    # (attrs, p1, items, p2) from sampling, reused by the gradient
    dists: tuple | None = field(default=None, compare=False, repr=False)

    @property
    def path(self) -> tuple[int, int, int]:
        return (self.item, self.attribute, self.next_item)


def _check_dims(*vs):
    d = np.shape(vs[0])
    if any(np.shape(v)[-1:] != d[-1:] for v in vs):
        raise ValueError(f"dimension mismatch: {[np.shape(v) for v in vs]}")


def attn_first(h_u, h_item, h_attr, slope: float = 0.01):
    """Importance of an attribute for (user, item); broadcasts over rows of ``h_attr``."""
    _check_dims(h_u, h_item, h_attr)
    return leaky_relu(np.asarray(h_item) * np.asarray(h_attr), slope) @ np.asarray(h_u)


def attn_second(h_u, h_attr, h_item2, slope: float = 0.01):
    """Score of a candidate item reached through ``h_attr``."""
    _check_dims(h_u, h_attr, h_item2)
    return leaky_relu(np.asarray(h_attr) * np.asarray(h_item2), slope) @ np.asarray(h_u)


def softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max())
    return e / e.sum()


def draw(p: np.ndarray, rng: np.random.Generator) -> int:
    """Index drawn from ``p``; zero-probability entries are never returned."""
    c = np.cumsum(p)
    k = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    if k >= len(p):
        k = int(np.flatnonzero(p > 0)[-1])
    return k


def as_mask(mask, n_items: int) -> np.ndarray:
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        return mask
    out = np.zeros(n_items, dtype=bool)
    idx = np.fromiter((int(x) for x in (mask if mask is not None else ())), dtype=np.int64)
    out[idx] = True
    return out


class PathSampler:
    """Sampling distributions for one embedding snapshot."""

    def __init__(self, ckg: CollabKG, emb: EmbeddingTable, slope: float = 0.01):
        self.ckg = ckg
        self.emb = emb
        self.slope = slope

    def step_one(self, state: State) -> tuple[np.ndarray, np.ndarray]:
        attrs = self.ckg.item_attributes(state.current_item)
        if len(attrs) == 0:
            raise DeadEndError(f"item {state.current_item} has no attributes")
        s = attn_first(self.emb.user(state.user), self.emb.item(state.current_item),
                       self.emb.attribute(attrs), self.slope)
        return attrs, softmax(s)

    def step_two(self, state: State, attr: int, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distribution over all item neighbours of ``attr``; masked ones get exactly 0."""
        items = self.ckg.attribute_items(attr)
        keep = ~mask[items]
        if not keep.any():
            raise DeadEndError(f"all items of attribute {attr} are masked")
        s = attn_second(self.emb.user(state.user), self.emb.attribute(attr),
                        self.emb.item(items[keep]), self.slope)
        probs = np.zeros(len(items))
        probs[keep] = softmax(s)
        return items, probs

    def sample(self, state: State, mask: np.ndarray, rng: np.random.Generator) -> Action:
        attrs, p1 = self.step_one(state)
        a = draw(p1, rng)
        items, p2 = self.step_two(state, int(attrs[a]), mask)
        b = draw(p2, rng)
        return Action(state.current_item, int(attrs[a]), int(items[b]),
                      math.log(p1[a]) + math.log(p2[b]), (attrs, p1, items, p2))

    def enumerate(self, state: State, mask: np.ndarray, budget: int = 100_000) -> list[tuple[Action, float]]:
        """Every admissible path with its probability.

        Attributes whose items are all masked are dead ends and contribute no
        paths, so the result sums to 1 only when no first-hop choice dead-ends.
        """
        attrs, p1 = self.step_one(state)
        out = []
        for a, pa in zip(attrs, p1):
            try:
                items, p2 = self.step_two(state, int(a), mask)
            except DeadEndError:
                continue
            for j, pj in zip(items, p2):
                if pj == 0.0:
                    continue
                if len(out) >= budget:
                    raise BudgetExceeded(f"more than {budget} paths")
                prob = float(pa * pj)
                out.append((Action(state.current_item, int(a), int(j), math.log(prob)), prob))
        return out

    def greedy(self, state: State, mask: np.ndarray) -> Action:
        """Most probable admissible path (first one on ties)."""
        paths = self.enumerate(state, mask)
        if not paths:
            raise DeadEndError(f"no admissible path from item {state.current_item}")
        best = max(range(len(paths)), key=lambda k: (paths[k][1], -k))
        return paths[best][0]

    def log_prob(self, state: State, action: Action, mask: np.ndarray) -> float:
        attrs, p1 = self.step_one(state)
        items, p2 = self.step_two(state, action.attribute, mask)
        pa = p1[np.flatnonzero(attrs == action.attribute)[0]]
        pj = p2[np.flatnonzero(items == action.next_item)[0]]
        return math.log(pa) + math.log(pj)

    def add_log_prob_grad(self, state: State, action: Action, mask: np.ndarray,
                          out: np.ndarray, weight: float = 1.0) -> None:
        """out[rows] += weight * d log P(action | state) / d embedding rows."""
        emb, slope = self.emb, self.slope
        h_u = emb.user(state.user)
        g_u = np.zeros_like(h_u)

        if action.dists is not None:
            attrs, p1, items, p2 = action.dists
        else:
            attrs, p1 = self.step_one(state)
            items, p2 = self.step_two(state, action.attribute, mask)

        # first hop
        c1 = -p1
        c1[np.flatnonzero(attrs == action.attribute)[0]] += 1.0
        h_i = emb.item(state.current_item)
        H_p = emb.attribute(attrs)
        z1 = h_i * H_p
        g1 = c1[:, None] * leaky_relu_grad(z1, slope)
        g_u += c1 @ leaky_relu(z1, slope)
        # neighbour lists hold distinct ids, so plain fancy-index accumulation is safe
        out[emb.row("item", state.current_item)] += weight * h_u * (g1 * H_p).sum(axis=0)
        out[emb.row("attribute", attrs)] += weight * g1 * h_i * h_u

        # second hop, unmasked support only
        keep = p2 > 0
        items, p2 = items[keep], p2[keep]
        h_p = emb.attribute(action.attribute)
        H_j = emb.item(items)
        z2 = h_p * H_j
        c2 = -p2
        c2[np.flatnonzero(items == action.next_item)[0]] += 1.0
        g2 = c2[:, None] * leaky_relu_grad(z2, slope)
        g_u += c2 @ leaky_relu(z2, slope)
        out[emb.row("attribute", action.attribute)] += weight * h_u * (g2 * H_j).sum(axis=0)
        out[emb.row("item", items)] += weight * g2 * h_p * h_u

        out[emb.row("user", state.user)] += weight * g_u


def step_one_dist(state: State, ckg: CollabKG, emb: EmbeddingTable):
    return PathSampler(ckg, emb).step_one(state)


def step_two_dist(state: State, attr: int, ckg: CollabKG, emb: EmbeddingTable, mask):
    return PathSampler(ckg, emb).step_two(state, attr, as_mask(mask, ckg.n_items))


def sample_action(state: State, ckg: CollabKG, emb: EmbeddingTable, mask, rng) -> Action:
    return PathSampler(ckg, emb).sample(state, as_mask(mask, ckg.n_items), rng)


def enumerate_action_dist(state: State, ckg: CollabKG, emb: EmbeddingTable, mask,
                          budget: int = 100_000) -> list[tuple[Action, float]]:
    return PathSampler(ckg, emb).enumerate(state, as_mask(mask, ckg.n_items), budget)
