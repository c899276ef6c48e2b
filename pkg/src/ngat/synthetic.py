"""Planted-block interaction generator and a dense, loop-based forward oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import InteractionGraph
from .model import LEAKY_SLOPE, AblationParams, EmbeddingTable, ModelConfig

MAX_ORACLE_EDGES = 1000


@dataclass(frozen=True)
class PlantedBlocksSpec:
    num_blocks: int = 2
    users_per_block: int = 200
    items_per_block: int = 200
    in_block_edge_prob: float = 0.30
    cross_block_edge_prob: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        for p in (self.in_block_edge_prob, self.cross_block_edge_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("edge probabilities must lie in [0, 1]")
        if min(self.num_blocks, self.users_per_block, self.items_per_block) < 1:
            raise ValueError("block counts and sizes must be positive")

    @property
    def expected_user_degree(self) -> float:
        return self.items_per_block * (self.in_block_edge_prob + (self.num_blocks - 1) * self.cross_block_edge_prob)

    @property
    def expected_edges(self) -> float:
        return self.num_blocks * self.users_per_block * self.expected_user_degree

    def user_block(self, user: int) -> int:
        return user // self.users_per_block

    def item_block(self, item: int) -> int:
        return item // self.items_per_block


def generate_planted(spec: PlantedBlocksSpec = PlantedBlocksSpec()) -> np.ndarray:
    """Independent Bernoulli edge per (user, item); returns sorted ``(E, 2)`` ids."""
    n_users = spec.num_blocks * spec.users_per_block
    n_items = spec.num_blocks * spec.items_per_block
    ub = np.arange(n_users) // spec.users_per_block
    ib = np.arange(n_items) // spec.items_per_block
    prob = np.where(ub[:, None] == ib[None, :], spec.in_block_edge_prob, spec.cross_block_edge_prob)
    rng = np.random.default_rng(spec.rng_seed)
    hit = rng.random((n_users, n_items)) < prob
    users, items = np.nonzero(hit)
    return np.stack([users, items], axis=1).astype(np.int64)


def write_pairs(edges: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in edges:
            fh.write(f"{u} {i}\n")


# ---------------------------------------------------------------------------
# Dense reference forward: plain loops, float64, no shared code with the engine


def _cos_relu(a, b, eps):
    na = max(math.sqrt(sum(x * x for x in a)), eps)
    nb = max(math.sqrt(sum(x * x for x in b)), eps)
    return min(max(sum(x * y for x, y in zip(a, b)) / (na * nb), 0.0), 1.0)


def _neighbor_aware(neigh, src, eps, include_self):
    n = len(neigh)
    if n == 1:
        return [1.0]
    out = []
    for p in range(n):
        total = 0.0
        for q in range(n):
            if p == q:
                total += 1.0 if include_self else 0.0
            else:
                total += _cos_relu(src[neigh[p]], src[neigh[q]], eps)
        out.append(total / (n if include_self else n - 1))
    return out


def _softmax(zs):
    top = max(zs)
    ex = [math.exp(z - top) for z in zs]
    s = sum(ex)
    return [e / s for e in ex]


def _matvec(W, x):
    return [sum(W[r][c] * x[c] for c in range(len(x))) for r in range(len(W))]


def _gather(dst_id, neigh, src, dst, src_deg, cfg, lw):
    d = cfg.embedding_dim
    variant = cfg.aggregator_variant
    if not neigh:
        return [0.0] * d
    if variant in ("ngat", "ngat_nonlinear"):
        alpha = _neighbor_aware(neigh, src, cfg.epsilon, cfg.include_self)
    elif variant == "lightgcn_mean":
        alpha = [1.0 / math.sqrt(src_deg[j]) for j in neigh]
    elif variant == "lightgat_dp":
        alpha = _softmax([sum(a * b for a, b in zip(dst[dst_id], src[j])) / math.sqrt(d) for j in neigh])
    else:
        W, a = lw
        hd = _matvec(W, dst[dst_id])
        zs = []
        for j in neigh:
            hs = _matvec(W, src[j])
            z = sum(a[t] * hd[t] for t in range(d)) + sum(a[d + t] * hs[t] for t in range(d))
            zs.append(z if z > 0 else LEAKY_SLOPE * z)
        alpha = _softmax(zs)
    scale = 1.0 / math.sqrt(len(neigh))
    return [scale * sum(alpha[p] * src[j][t] for p, j in enumerate(neigh)) for t in range(d)]


def dense_reference_forward(graph: InteractionGraph, table: EmbeddingTable, config: ModelConfig,
                            ablation: AblationParams = None, layer_adjacency=None):
    """Recompute final user and item embeddings with nested Python loops.

    Uses the full training adjacency unless ``layer_adjacency`` (same layout
    as the engine's) is given. Returns float64 arrays.
    """
    if graph.num_train_edges > MAX_ORACLE_EDGES:
        raise ValueError(f"oracle limited to {MAX_ORACLE_EDGES} edges, graph has {graph.num_train_edges}")
    K = config.num_layers
    if layer_adjacency is None:
        layer_adjacency = [(graph.train_adj_user, graph.train_adj_item)] * K
    eu = [list(map(float, r)) for r in np.asarray(table.user_rows, dtype=np.float64)]
    ei = [list(map(float, r)) for r in np.asarray(table.item_rows, dtype=np.float64)]
    w = {} if ablation is None else {k: np.asarray(v, dtype=np.float64).tolist() for k, v in ablation.weights.items()}
    sum_u = [row[:] for row in eu]
    sum_i = [row[:] for row in ei]
    for k in range(K):
        adj_u, adj_i = layer_adjacency[k]
        nu = [adj_u[u].tolist() for u in range(graph.num_users)]
        ni = [adj_i[i].tolist() for i in range(graph.num_items)]
        deg_u = [len(x) for x in nu]
        deg_i = [len(x) for x in ni]
        src_u, src_i = eu, ei
        lw = None
        if config.aggregator_variant == "ngat_nonlinear":
            src_u = [[max(z, 0.0) for z in _matvec(w[f"W_user.{k}"], r)] for r in eu]
            src_i = [[max(z, 0.0) for z in _matvec(w[f"W_item.{k}"], r)] for r in ei]
        elif config.aggregator_variant == "lightgat_mlp":
            lw = (w[f"W.{k}"], w[f"a.{k}"])
        new_u = [_gather(u, nu[u], src_i, eu, deg_i, config, lw) for u in range(graph.num_users)]
        new_i = [_gather(i, ni[i], src_u, ei, deg_u, config, lw) for i in range(graph.num_items)]
        eu, ei = new_u, new_i
        for acc, layer in ((sum_u, eu), (sum_i, ei)):
            for r, row in enumerate(layer):
                for t, x in enumerate(row):
                    acc[r][t] += x
    return np.array(sum_u, dtype=np.float64), np.array(sum_i, dtype=np.float64)
