"""Neighbor-aware graph attention propagation and its exact gradients.

Everything works on whole-graph embedding matrices. A propagation layer is
two directed aggregations: users gather from their items and items gather
from their users. Forward passes keep what the backward pass needs in
``LayerActivations``; gradients are accumulated by hand, layer by layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .graph import Adjacency

VARIANTS = ("ngat", "ngat_nonlinear", "lightgat_mlp", "lightgat_dp", "lightgcn_mean")
LEAKY_SLOPE = 0.2

# Upper bound on floats held by one padded attention chunk.
_CHUNK_BUDGET = 1 << 21


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 64
    num_layers: int = 3
    aggregator_variant: str = "ngat"
    epsilon: float = 1e-12
    include_self: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.aggregator_variant not in VARIANTS:
            raise ValueError(f"unknown aggregator_variant {self.aggregator_variant!r}; expected one of {VARIANTS}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class EmbeddingTable:
    """Layer-0 user and item rows plus Adam moment buffers."""

    user_rows: np.ndarray
    item_rows: np.ndarray
    user_m: np.ndarray = None
    user_v: np.ndarray = None
    item_m: np.ndarray = None
    item_v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        for name in ("user_m", "user_v"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.user_rows))
        for name in ("item_m", "item_v"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.item_rows))

    @property
    def num_users(self) -> int:
        return self.user_rows.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_rows.shape[0]

    @property
    def dim(self) -> int:
        return self.user_rows.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(
            self.user_rows.copy(), self.item_rows.copy(),
            self.user_m.copy(), self.user_v.copy(), self.item_m.copy(), self.item_v.copy(), self.step,
        )

    def astype(self, dtype) -> "EmbeddingTable":
        t = self.copy()
        for name in ("user_rows", "item_rows", "user_m", "user_v", "item_m", "item_v"):
            setattr(t, name, getattr(t, name).astype(dtype))
        return t


@dataclass
class AblationParams:
    """Extra per-layer weights of the ``lightgat_mlp`` and ``ngat_nonlinear`` variants.

    Keys are ``W.{k}``/``a.{k}`` (mlp) or ``W_user.{k}``/``W_item.{k}``
    (nonlinear) where ``k`` is the zero-based index of the layer the weight
    feeds.
    """

    weights: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for key, w in self.weights.items():
            self.m.setdefault(key, np.zeros_like(w))
            self.v.setdefault(key, np.zeros_like(w))

    def copy(self) -> "AblationParams":
        return AblationParams(
            {k: w.copy() for k, w in self.weights.items()},
            {k: w.copy() for k, w in self.m.items()},
            {k: w.copy() for k, w in self.v.items()},
        )

    def astype(self, dtype) -> "AblationParams":
        return AblationParams(
            {k: w.astype(dtype) for k, w in self.weights.items()},
            {k: w.astype(dtype) for k, w in self.m.items()},
            {k: w.astype(dtype) for k, w in self.v.items()},
        )


def ablation_keys(variant: str, num_layers: int, dim: int) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) order of the variant's extra parameters."""
    keys = []
    for k in range(num_layers):
        if variant == "lightgat_mlp":
            keys += [(f"W.{k}", (dim, dim)), (f"a.{k}", (2 * dim,))]
        elif variant == "ngat_nonlinear":
            keys += [(f"W_user.{k}", (dim, dim)), (f"W_item.{k}", (dim, dim))]
    return keys


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_embeddings(num_users: int, num_items: int, dim: int, rng_seed: int = 0, dtype="float32") -> EmbeddingTable:
    """Xavier-uniform rows on ``[-sqrt(6/2d), +sqrt(6/2d)]``; users drawn before items."""
    if num_users < 1 or num_items < 1 or dim < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0]))
    bound = xavier_bound(dim, dim)
    users = rng.uniform(-bound, bound, size=(num_users, dim))
    items = rng.uniform(-bound, bound, size=(num_items, dim))
    return EmbeddingTable(users.astype(dtype), items.astype(dtype))


def init_ablation_params(config: ModelConfig, rng_seed: int = 0) -> AblationParams:
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 1]))
    weights = {}
    for key, shape in ablation_keys(config.aggregator_variant, config.num_layers, config.embedding_dim):
        if len(shape) == 2:
            bound = xavier_bound(shape[1], shape[0])
        else:
            bound = xavier_bound(shape[0], 1)
        weights[key] = rng.uniform(-bound, bound, size=shape).astype(config.dtype)
    return AblationParams(weights)


# ---------------------------------------------------------------------------
# Single-node reference operations (used by tests and for inspection)


def pairwise_attention(a: np.ndarray, b: np.ndarray, epsilon: float = 1e-12) -> float:
    """ReLU of the epsilon-guarded cosine similarity of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = float(a @ b) / (max(float(np.linalg.norm(a)), epsilon) * max(float(np.linalg.norm(b)), epsilon))
    return min(max(cos, 0.0), 1.0)


def attention_coefficients(neighbors: Sequence[int], embeddings: np.ndarray,
                           epsilon: float = 1e-12, include_self: bool = True) -> np.ndarray:
    """Neighbor-aware coefficient of each neighbor of one destination node.

    Neighbor ``x`` gets the mean of ``pairwise_attention(e_x, e_y)`` over the
    node's neighbors ``y``. The self pair contributes exactly 1. With
    ``include_self=False`` the mean runs over the other neighbors only and a
    lone neighbor gets 1.
    """
    neighbors = list(neighbors)
    if not neighbors:
        raise ValueError("attention needs at least one neighbor")
    n = len(neighbors)
    if n == 1:
        return np.ones(1)
    out = np.empty(n)
    for p, x in enumerate(neighbors):
        total = 0.0
        for q, y in enumerate(neighbors):
            if p == q:
                total += 1.0 if include_self else 0.0
            else:
                total += pairwise_attention(embeddings[x], embeddings[y], epsilon)
        out[p] = total / (n if include_self else n - 1)
    return out


def combine_layers(layers: Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted sum of the per-layer embeddings."""
    out = np.array(layers[0], copy=True)
    for e in layers[1:]:
        out += e
    return out


def predict(user: int, item: int, final_user: np.ndarray, final_item: np.ndarray) -> float:
    return float(final_user[user] @ final_item[item])


# ---------------------------------------------------------------------------
# Directed aggregation: destination rows gather from source rows


def _scatter_rows(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """``out[index[e]] += values[e]`` with a fixed summation order."""
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n).astype(values.dtype, copy=False)
    mat = sparse.csr_matrix(
        (np.ones(len(index), dtype=values.dtype), (index, np.arange(len(index)))), shape=(n, len(index))
    )
    return np.asarray(mat @ values)


def _segment_sum(values: np.ndarray, adj: Adjacency, nonempty: np.ndarray) -> np.ndarray:
    out = np.zeros((len(adj),) + values.shape[1:], dtype=values.dtype)
    if len(nonempty):
        out[nonempty] = np.add.reduceat(values, adj.indptr[nonempty], axis=0)
    return out


@dataclass
class _Chunk:
    nodes: np.ndarray  # destination ids, shape (c,)
    idx: np.ndarray  # source ids, shape (c, m); padded slots hold 0
    pos: np.ndarray  # CSR positions, shape (c, m); padded slots hold 0
    mask: np.ndarray  # (c, m) valid slots


def _attention_chunks(adj: Adjacency, dim: int) -> list[_Chunk]:
    deg = adj.degrees()
    order = np.flatnonzero(deg)
    order = order[np.argsort(deg[order], kind="stable")]
    chunks = []
    start = 0
    while start < len(order):
        end = start + 1
        while end < len(order):
            m = deg[order[end]]
            if (end + 1 - start) * m * (m + dim) > _CHUNK_BUDGET:
                break
            end += 1
        nodes = order[start:end]
        m = int(deg[nodes[-1]])
        slots = np.arange(m)
        mask = slots[None, :] < deg[nodes][:, None]
        pos = np.where(mask, adj.indptr[nodes][:, None] + slots[None, :], 0)
        idx = np.where(mask, adj.indices[pos] if adj.num_edges else 0, 0)
        chunks.append(_Chunk(nodes, idx, pos, mask))
        start = end
    return chunks


@dataclass
class DirectedCache:
    """What one directed aggregation keeps for its backward pass."""

    adj: Adjacency
    variant: str
    alpha: np.ndarray  # one coefficient per stored edge, CSR order
    scale: np.ndarray  # 1/sqrt(deg) per destination (0 for isolated)
    src: np.ndarray
    dst: np.ndarray = None
    chunks: list = None
    extra: dict = None


def _ngat_forward(adj, src, scale, eps, include_self, chunks):
    """Returns ``(out, alpha, saved)``; ``saved`` holds per-chunk tensors for backward."""
    alpha = np.zeros(adj.num_edges, dtype=src.dtype)
    out = np.zeros((len(adj), src.shape[1]), dtype=src.dtype)
    saved = []
    for ch in chunks:
        S = src[ch.idx] * ch.mask[..., None]
        norm = np.sqrt(np.einsum("cmd,cmd->cm", S, S))
        N = S / np.maximum(norm, eps)[..., None]
        C = N @ N.transpose(0, 2, 1)
        pair = ch.mask[:, :, None] & ch.mask[:, None, :]
        diag = np.arange(S.shape[1])
        pair[:, diag, diag] = False
        # pre-ReLU cosine sign: where d(alpha)/d(cosine) is nonzero
        active = (C > 0) & pair
        F = np.minimum(C, 1.0) * active
        deg = ch.mask.sum(axis=1)
        if include_self:
            F[:, diag, diag] = ch.mask
            denom = deg.astype(src.dtype)
        else:
            denom = np.maximum(deg - 1, 1).astype(src.dtype)
            active[deg == 1] = False
        a = F.sum(axis=2) / denom[:, None]
        if not include_self:
            a[deg == 1, 0] = 1.0
        alpha[ch.pos[ch.mask]] = a[ch.mask]
        out[ch.nodes] = scale[ch.nodes, None] * np.einsum("cm,cmd->cd", a, S)
        saved.append((S, N, norm, active, denom, a))
    return out, alpha, saved


def _ngat_backward(cache, grad_out, eps):
    src = cache.src
    dsrc = np.zeros_like(src)
    for ch, (S, N, norm, active, denom, a) in zip(cache.chunks, cache.extra["saved"]):
        G = grad_out[ch.nodes] * cache.scale[ch.nodes, None]
        dS = a[..., None] * G[:, None, :]
        da = np.einsum("cmd,cd->cm", S, G) / denom[:, None]
        # row i of the pairwise matrix feeds alpha_i only; diagonal is constant
        # active is symmetric, so dC + dC^T collapses to one masked outer sum
        dN = (active * (da[:, :, None] + da[:, None, :])) @ N
        radial = np.einsum("cmd,cmd->cm", N, dN)
        big = norm > eps
        if big.all():
            dS += (dN - N * radial[..., None]) / norm[..., None]
        else:
            safe = np.where(big, norm, eps)[..., None]
            dS += np.where(big[..., None], (dN - N * radial[..., None]) / safe, dN / eps)
        valid = ch.mask
        dsrc += _scatter_rows(ch.idx[valid], dS[valid], len(src))
    return dsrc


def _softmax_segments(z, adj, nonempty, rows):
    zmax = np.full(len(adj), -np.inf, dtype=z.dtype)
    if len(nonempty):
        zmax[nonempty] = np.maximum.reduceat(z, adj.indptr[nonempty])
    ex = np.exp(z - zmax[rows])
    total = _segment_sum(ex, adj, nonempty)
    return ex / total[rows]


def aggregate_layer(adj: Adjacency, src: np.ndarray, dst: np.ndarray, config: ModelConfig,
                    src_degrees: np.ndarray = None, layer_weights: dict = None):
    """Compute one directed aggregation and return ``(out, cache)``.

    ``adj`` lists, per destination node, the source nodes it gathers from.
    ``src_degrees`` (neighbor counts of the source nodes in their own
    adjacency) is needed only for ``lightgcn_mean``. ``layer_weights`` holds
    ``W`` and ``a`` for ``lightgat_mlp``; ``ngat_nonlinear`` callers pass the
    already transformed sources.
    """
    variant = config.aggregator_variant
    deg = adj.degrees()
    with np.errstate(divide="ignore"):
        scale = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1)), 0.0).astype(src.dtype)
    rows = adj.rows()
    cols = adj.indices
    nonempty = np.flatnonzero(deg)
    cache = DirectedCache(adj, variant, None, scale, src, dst)

    if variant in ("ngat", "ngat_nonlinear"):
        cache.chunks = _attention_chunks(adj, src.shape[1])
        out, alpha, saved = _ngat_forward(adj, src, scale, config.epsilon, config.include_self, cache.chunks)
        cache.alpha = alpha
        cache.extra = {"saved": saved}
        return out, cache

    if variant == "lightgcn_mean":
        if src_degrees is None:
            raise ValueError("lightgcn_mean needs source degrees")
        sd = src_degrees[cols].astype(src.dtype)
        alpha = np.where(sd > 0, 1.0 / np.sqrt(np.maximum(sd, 1)), 0.0).astype(src.dtype)
    elif variant == "lightgat_dp":
        z = np.einsum("ed,ed->e", dst[rows], src[cols]) / np.sqrt(src.shape[1])
        alpha = _softmax_segments(z, adj, nonempty, rows)
    elif variant == "lightgat_mlp":
        W, a = layer_weights["W"], layer_weights["a"]
        d = src.shape[1]
        h_dst, h_src = dst @ W.T, src @ W.T
        q_dst, q_src = h_dst @ a[:d], h_src @ a[d:]
        pre = q_dst[rows] + q_src[cols]
        z = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
        alpha = _softmax_segments(z, adj, nonempty, rows)
        cache.extra = {"pre": pre, "h_dst": h_dst, "h_src": h_src, "W": W, "a": a}
    else:  # pragma: no cover - guarded by ModelConfig
        raise ValueError(variant)
    cache.alpha = alpha.astype(src.dtype, copy=False)
    weights = scale[rows] * cache.alpha
    out = _scatter_rows(rows, weights[:, None] * src[cols], len(adj))
    return out, cache


def aggregate_backward(cache: DirectedCache, grad_out: np.ndarray, config: ModelConfig):
    """Return ``(d_src, d_dst, d_layer_weights)`` for one directed aggregation."""
    variant = cache.variant
    src, dst, adj = cache.src, cache.dst, cache.adj
    if variant in ("ngat", "ngat_nonlinear"):
        return _ngat_backward(cache, grad_out, config.epsilon), None, {}

    rows, cols = adj.rows(), adj.indices
    nonempty = np.flatnonzero(adj.degrees())
    G_e = grad_out[rows] * cache.scale[rows, None]
    dsrc = _scatter_rows(cols, cache.alpha[:, None] * G_e, len(src))
    if variant == "lightgcn_mean":
        return dsrc, None, {}

    dalpha = np.einsum("ed,ed->e", src[cols], G_e)
    alpha = cache.alpha
    dz = alpha * (dalpha - _segment_sum(alpha * dalpha, adj, nonempty)[rows])
    if variant == "lightgat_dp":
        inv = 1.0 / np.sqrt(src.shape[1])
        ddst = _scatter_rows(rows, (dz * inv)[:, None] * src[cols], len(dst))
        dsrc += _scatter_rows(cols, (dz * inv)[:, None] * dst[rows], len(src))
        return dsrc, ddst, {}

    ex = cache.extra
    W, a = ex["W"], ex["a"]
    d = src.shape[1]
    dpre = dz * np.where(ex["pre"] > 0, 1.0, LEAKY_SLOPE).astype(src.dtype)
    dq_dst = _segment_sum(dpre, adj, nonempty)
    dq_src = _scatter_rows(cols, dpre, len(src))
    da = np.concatenate([ex["h_dst"].T @ dq_dst, ex["h_src"].T @ dq_src])
    dh_dst = dq_dst[:, None] * a[:d]
    dh_src = dq_src[:, None] * a[d:]
    dW = dh_dst.T @ dst + dh_src.T @ src
    ddst = dh_dst @ W
    dsrc += dh_src @ W
    return dsrc, ddst, {"W": dW, "a": da}


# ---------------------------------------------------------------------------
# Full forward / backward


@dataclass
class LayerActivations:
    """Per-layer embeddings, attention caches and the final (summed) embeddings."""

    user_layers: list
    item_layers: list
    user_caches: list  # DirectedCache per layer, users as destinations
    item_caches: list
    final_user: np.ndarray
    final_item: np.ndarray
    transformed: list = None  # ngat_nonlinear: (z_user, p_user, z_item, p_item) per layer

    def alphas(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """(item->user, user->item) coefficients feeding layer ``layer`` (1-based)."""
        return self.user_caches[layer - 1].alpha, self.item_caches[layer - 1].alpha


def forward(table: EmbeddingTable, layer_adjacency: Sequence[tuple[Adjacency, Adjacency]],
            config: ModelConfig, ablation: AblationParams = None) -> LayerActivations:
    """Propagate layer-0 rows through ``config.num_layers`` layers.

    ``layer_adjacency[k]`` is the (user-side, item-side) adjacency used by
    layer ``k + 1``.
    """
    K = config.num_layers
    if len(layer_adjacency) < K:
        raise ValueError(f"need adjacency for {K} layers, got {len(layer_adjacency)}")
    dtype = config.np_dtype
    eu = table.user_rows.astype(dtype, copy=False)
    ei = table.item_rows.astype(dtype, copy=False)
    weights = {} if ablation is None else {k: w.astype(dtype, copy=False) for k, w in ablation.weights.items()}
    user_layers, item_layers = [eu], [ei]
    user_caches, item_caches, transformed = [], [], []
    variant = config.aggregator_variant
    for k in range(K):
        adj_u, adj_i = layer_adjacency[k]
        src_for_users, src_for_items = ei, eu
        lw = None
        if variant == "ngat_nonlinear":
            zu, zi = eu @ weights[f"W_user.{k}"].T, ei @ weights[f"W_item.{k}"].T
            pu, pi = np.maximum(zu, 0.0), np.maximum(zi, 0.0)
            transformed.append((zu, pu, zi, pi))
            src_for_users, src_for_items = pi, pu
        elif variant == "lightgat_mlp":
            lw = {"W": weights[f"W.{k}"], "a": weights[f"a.{k}"]}
        new_u, cu = aggregate_layer(adj_u, src_for_users, eu, config, adj_i.degrees(), lw)
        new_i, ci = aggregate_layer(adj_i, src_for_items, ei, config, adj_u.degrees(), lw)
        user_caches.append(cu)
        item_caches.append(ci)
        eu, ei = new_u, new_i
        user_layers.append(eu)
        item_layers.append(ei)
    return LayerActivations(
        user_layers, item_layers, user_caches, item_caches,
        combine_layers(user_layers), combine_layers(item_layers), transformed or None,
    )


@dataclass
class Gradients:
    user: np.ndarray
    item: np.ndarray
    ablation: dict = field(default_factory=dict)


def backward(acts: LayerActivations, grad_final_user: np.ndarray, grad_final_item: np.ndarray,
             config: ModelConfig, ablation: AblationParams = None) -> Gradients:
    """Pull gradients w.r.t. the final embeddings back to layer-0 rows and weights."""
    K = config.num_layers
    if len(acts.user_caches) != K:
        raise AssertionError("activations do not match the configured layer count")
    variant = config.aggregator_variant
    dtype = config.np_dtype
    gu = np.array(grad_final_user, dtype=dtype)
    gi = np.array(grad_final_item, dtype=dtype)
    dweights = {}
    for k in reversed(range(K)):
        cu, ci = acts.user_caches[k], acts.item_caches[k]
        lw_grads = {}
        # users gather from items: src = items (or their transform), dst = users
        dsrc_i, ddst_u, gw_u = aggregate_backward(cu, gu, config)
        dsrc_u, ddst_i, gw_i = aggregate_backward(ci, gi, config)
        for name in set(gw_u) | set(gw_i):
            lw_grads[name] = gw_u.get(name, 0) + gw_i.get(name, 0)
        prev_u = np.array(grad_final_user, dtype=dtype)
        prev_i = np.array(grad_final_item, dtype=dtype)
        if variant == "ngat_nonlinear":
            zu, _, zi, _ = acts.transformed[k]
            eu, ei = acts.user_layers[k], acts.item_layers[k]
            dzu = dsrc_u * (zu > 0)
            dzi = dsrc_i * (zi > 0)
            Wu = ablation.weights[f"W_user.{k}"].astype(dtype, copy=False)
            Wi = ablation.weights[f"W_item.{k}"].astype(dtype, copy=False)
            dweights[f"W_user.{k}"] = dzu.T @ eu
            dweights[f"W_item.{k}"] = dzi.T @ ei
            prev_u += dzu @ Wu
            prev_i += dzi @ Wi
        else:
            prev_u += dsrc_u
            prev_i += dsrc_i
        if ddst_u is not None:
            prev_u += ddst_u
        if ddst_i is not None:
            prev_i += ddst_i
        if variant == "lightgat_mlp":
            dweights[f"W.{k}"] = lw_grads["W"]
            dweights[f"a.{k}"] = lw_grads["a"]
        gu, gi = prev_u, prev_i
    return Gradients(gu, gi, dweights)


def final_embeddings(table: EmbeddingTable, layer_adjacency, config: ModelConfig,
                     ablation: AblationParams = None) -> tuple[np.ndarray, np.ndarray]:
    acts = forward(table, layer_adjacency, config, ablation)
    return acts.final_user, acts.final_item
