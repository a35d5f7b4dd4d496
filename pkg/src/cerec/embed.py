"""Graph learning module: GraphSage-style convolution over the CKG.

Each layer concatenates an entity's own vector with the symmetrically
normalised sum of its neighbours, applies a linear map and LeakyReLU. Layer
outputs are projected to the final width and summed. Gradients are computed
by hand so the policy gradient can reach every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .ckg import ATTRIBUTE, ITEM, USER, CollabKG


class DimensionError(ValueError):
    pass


def leaky_relu(x, slope: float = 0.01):
    # valid for 0 <= slope < 1
    return np.maximum(x, slope * x)


def leaky_relu_grad(x, slope: float = 0.01):
    return (x > 0) * (1.0 - slope) + slope


@dataclass
class GlmParams:
    base: np.ndarray  # (n_entities, d_0)
    weights: list  # W[l]: (d_{l+1}, 2 d_l)
    projections: list  # P[l]: (d_L, d_{l+1}) or None when d_{l+1} == d_L
    leaky_slope: float = 0.01

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.base.shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        """All learnable arrays in a fixed order (shared with gradients)."""
        return [self.base, *self.weights, *(p for p in self.projections if p is not None)]

    def names(self) -> list[str]:
        out = ["base"] + [f"W{l + 1}" for l in range(self.n_layers)]
        out += [f"P{l + 1}" for l, p in enumerate(self.projections) if p is not None]
        return out

    def copy(self) -> "GlmParams":
        return GlmParams(
            self.base.copy(),
            [w.copy() for w in self.weights],
            [None if p is None else p.copy() for p in self.projections],
            self.leaky_slope,
        )

    def zeros_like(self) -> "GlmParams":
        return GlmParams(
            np.zeros_like(self.base),
            [np.zeros_like(w) for w in self.weights],
            [None if p is None else np.zeros_like(p) for p in self.projections],
            self.leaky_slope,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for a in self.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def save(self, path, meta: str | None = None) -> None:
        extra = {"meta": np.asarray(meta)} if meta else {}
        np.savez(path, **dict(zip(self.names(), self.arrays())), leaky_slope=self.leaky_slope, **extra)

    @classmethod
    def load(cls, path) -> "GlmParams":
        with np.load(path) as z:
            weights, projections = [], []
            l = 1
            while f"W{l}" in z:
                weights.append(z[f"W{l}"].copy())
                projections.append(z[f"P{l}"].copy() if f"P{l}" in z else None)
                l += 1
            return cls(z["base"].copy(), weights, projections, float(z["leaky_slope"]))


@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # (n_entities, d) over the global [users|items|attributes] index
    n_users: int
    n_items: int

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def user(self, u):
        return self.vectors[u]

    def item(self, i):
        return self.vectors[self.n_users + np.asarray(i)]

    def attribute(self, p):
        return self.vectors[self.n_users + self.n_items + np.asarray(p)]

    def row(self, kind: str, idx):
        off = {USER: 0, ITEM: self.n_users, ATTRIBUTE: self.n_users + self.n_items}[kind]
        return off + np.asarray(idx)

    def save_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for e, v in enumerate(self.vectors):
                f.write(f"{e}\t" + " ".join(f"{x:.17g}" for x in v) + "\n")


@dataclass
class ForwardCache:
    adj: sp.csr_matrix
    inputs: list = field(default_factory=list)  # X_l = [H_{l-1} | A H_{l-1}]
    pre: list = field(default_factory=list)  # Z_l
    outputs: list = field(default_factory=list)  # H_l


def init_params(n_entities: int, dims=(64, 32, 64), seed: int = 0,
                leaky_slope: float = 0.01, scale: float = 0.01) -> GlmParams:
    """Uniform [-scale, scale] init for base table, weights and projections."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError("dims needs the input width and at least one layer")
    rng = np.random.default_rng(seed)
    base = rng.uniform(-scale, scale, size=(n_entities, dims[0]))
    weights = [rng.uniform(-scale, scale, size=(dims[l + 1], 2 * dims[l])) for l in range(len(dims) - 1)]
    d_out = dims[-1]
    projections = [
        None if dims[l + 1] == d_out else rng.uniform(-scale, scale, size=(d_out, dims[l + 1]))
        for l in range(len(dims) - 1)
    ]
    return GlmParams(base, weights, projections, leaky_slope)


def normalized_adjacency(adj: sp.spmatrix) -> sp.csr_matrix:
    """D^{-1/2} A D^{-1/2}; isolated nodes get zero rows."""
    adj = sp.csr_matrix(adj, dtype=np.float64)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv)
    return (d @ adj @ d).tocsr()


def aggregate_neighbors(ckg: CollabKG, h_prev: np.ndarray, e: int) -> np.ndarray:
    """Normalised neighbour message for global entity index ``e``."""
    nbrs = _global_neighbors(ckg, e)
    out = np.zeros(h_prev.shape[1])
    if len(nbrs) == 0:
        return out
    for n in nbrs:
        out += h_prev[n] / np.sqrt(len(nbrs) * len(_global_neighbors(ckg, n)))
    return out


def _global_neighbors(ckg: CollabKG, e: int) -> list[int]:
    for kind in (ATTRIBUTE, ITEM, USER):
        off = ckg.offset(kind)
        if e >= off:
            idx = e - off
            break
    return [int(ckg.offset(t) + x) for t in (USER, ITEM, ATTRIBUTE) for x in ckg.neighbors(kind, idx, t)]


def conv_layer(params: GlmParams, l: int, h_prev: np.ndarray, messages: np.ndarray) -> np.ndarray:
    """Layer ``l`` (1-based): LeakyReLU(W_l [h_prev | messages])."""
    w = params.weights[l - 1]
    x = np.concatenate([h_prev, messages], axis=1)
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"layer {l} expects input width {w.shape[1]}, got {x.shape[1]}")
    return leaky_relu(x @ w.T, params.leaky_slope)


def layer_aggregate(h_list: list[np.ndarray]) -> np.ndarray:
    if not h_list:
        raise DimensionError("no layers to aggregate")
    shape = np.shape(h_list[0])
    for h in h_list:
        if np.shape(h) != shape:
            raise DimensionError(f"layer shape {np.shape(h)} differs from {shape}")
    return np.sum(np.asarray(h_list, dtype=np.float64), axis=0)


def glm_forward(adj_norm: sp.csr_matrix, params: GlmParams) -> tuple[np.ndarray, ForwardCache]:
    """Full-graph forward on a pre-normalised adjacency."""
    if adj_norm.shape[0] != params.base.shape[0]:
        raise DimensionError("adjacency and base table disagree on entity count")
    cache = ForwardCache(adj_norm)
    h = params.base
    projected = []
    for l, w in enumerate(params.weights):
        x = np.concatenate([h, adj_norm @ h], axis=1)
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"layer {l + 1} expects input width {w.shape[1]}, got {x.shape[1]}")
        z = x @ w.T
        h = leaky_relu(z, params.leaky_slope)
        cache.inputs.append(x)
        cache.pre.append(z)
        cache.outputs.append(h)
        p = params.projections[l]
        projected.append(h if p is None else h @ p.T)
    return layer_aggregate(projected), cache


def glm_backward(cache: ForwardCache, params: GlmParams, grad_out: np.ndarray) -> GlmParams:
    """Reverse-mode gradients of sum(grad_out * forward(params))."""
    grads = params.zeros_like()
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grad_h = None
    for l in reversed(range(params.n_layers)):
        p = params.projections[l]
        h = cache.outputs[l]
        if p is None:
            g = grad_out.copy()
        else:
            grads.projections[l][...] = grad_out.T @ h
            g = grad_out @ p
        if grad_h is not None:
            g += grad_h
        gz = g * leaky_relu_grad(cache.pre[l], params.leaky_slope)
        grads.weights[l][...] = gz.T @ cache.inputs[l]
        gx = gz @ params.weights[l]
        d = gx.shape[1] // 2
        # normalised adjacency is symmetric
        grad_h = gx[:, :d] + cache.adj.T @ gx[:, d:]
    grads.base[...] = grad_h
    return grads


class GraphEmbedder:
    """Binds a CKG to its normalised adjacency for repeated forward passes."""

    def __init__(self, ckg: CollabKG):
        self.ckg = ckg
        self.adj = normalized_adjacency(ckg.adjacency_matrix())

    def forward(self, params: GlmParams) -> tuple[EmbeddingTable, ForwardCache]:
        vec, cache = glm_forward(self.adj, params)
        return EmbeddingTable(vec, self.ckg.n_users, self.ckg.n_items), cache

    def backward(self, cache: ForwardCache, params: GlmParams, grad: np.ndarray) -> GlmParams:
        return glm_backward(cache, params, grad)


def forward(ckg: CollabKG, params: GlmParams) -> EmbeddingTable:
    return GraphEmbedder(ckg).forward(params)[0]


def backward(ckg: CollabKG, params: GlmParams, grad: np.ndarray) -> GlmParams:
    emb = GraphEmbedder(ckg)
    _, cache = emb.forward(params)
    return emb.backward(cache, params, grad)
