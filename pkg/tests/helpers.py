"""Shared builders and the finite-difference oracle used across test modules."""

import math

import numpy as np

from ngat.graph import InteractionGraph
from ngat.model import ModelConfig, init_ablation_params, init_embeddings
from ngat.trainer import MiniBatch, loss_and_gradients, sample_batches

FD_STEP = 1e-5
# Central differences in float64 carry ~1e-11 absolute rounding noise, so
# relative error is measured against max(|g|, |fd|, REL_FLOOR).
REL_FLOOR = 1e-4


def train_only_graph(users, items, num_users, num_items):
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64))
    return InteractionGraph.from_splits(num_users, num_items, (users, items), empty, empty)


def random_graph(rng, max_users=6, max_items=6, p=0.5, min_users=2, min_items=2):
    nu = int(rng.integers(min_users, max_users + 1))
    ni = int(rng.integers(min_items, max_items + 1))
    hit = rng.random((nu, ni)) < p
    hit[rng.integers(nu), rng.integers(ni)] = True
    u, i = np.nonzero(hit)
    return train_only_graph(u, i, nu, ni)


def full_adjacency(graph, layers):
    return [(graph.train_adj_user, graph.train_adj_item)] * layers


def tiny_instance(variant, seed, dim=4, max_layers=3):
    rng = np.random.default_rng(seed)
    graph = random_graph(rng, 5, 5, p=0.6, min_users=3, min_items=3)
    cfg = ModelConfig(dim, int(rng.integers(1, max_layers + 1)), variant, dtype="float64",
                      include_self=bool(rng.integers(0, 2)))
    table = init_embeddings(graph.num_users, graph.num_items, dim, seed, dtype="float64")
    ablation = init_ablation_params(cfg, seed) if variant in ("lightgat_mlp", "ngat_nonlinear") else None
    b = 6
    batch = MiniBatch(rng.integers(0, graph.num_users, b), rng.integers(0, graph.num_items, b),
                      rng.integers(0, graph.num_items, b))
    return graph, cfg, table, ablation, batch


def parameter_views(table, grads, ablation):
    views = [("user", table.user_rows, grads.user), ("item", table.item_rows, grads.item)]
    if ablation is not None:
        views += [(k, ablation.weights[k], grads.ablation[k]) for k in sorted(ablation.weights)]
    return views


def finite_difference_errors(graph, cfg, table, ablation, batch, l2=1e-3, step=FD_STEP, select=None):
    """Yield ``(name, flat_index, analytic, numeric, rel_error)`` for each checked parameter."""
    adj = full_adjacency(graph, cfg.num_layers)
    _, grads = loss_and_gradients(table, adj, batch, cfg, l2, "standard_bpr", ablation)
    for name, param, grad in parameter_views(table, grads, ablation):
        flat, gflat = param.reshape(-1), grad.reshape(-1)
        indices = range(flat.size) if select is None else select(name, flat.size)
        for idx in indices:
            old = flat[idx]
            flat[idx] = old + step
            plus, _ = loss_and_gradients(table, adj, batch, cfg, l2, "standard_bpr", ablation)
            flat[idx] = old - step
            minus, _ = loss_and_gradients(table, adj, batch, cfg, l2, "standard_bpr", ablation)
            flat[idx] = old
            numeric = (plus - minus) / (2 * step)
            analytic = float(gflat[idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)
            yield name, idx, analytic, numeric, rel


def bpr_mf_reference(graph, dim, seed, lr, batch_size, l2, epochs):
    """Plain float64 BPR matrix factorisation with lazy row-wise Adam."""
    table = init_embeddings(graph.num_users, graph.num_items, dim, seed, "float64")
    P, Q = table.user_rows.copy(), table.item_rows.copy()
    mP, vP, mQ, vQ = (np.zeros_like(x) for x in (P, P, Q, Q))
    step = 0
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 2]))
        for batch in sample_batches(graph, batch_size, rng):
            gP, gQ = np.zeros_like(P), np.zeros_like(Q)
            for u, i, j in zip(batch.users, batch.pos, batch.neg):
                x = P[u] @ Q[i] - P[u] @ Q[j]
                c = -1.0 / (1.0 + math.exp(x)) / len(batch)
                gP[u] += c * (Q[i] - Q[j])
                gQ[i] += c * P[u]
                gQ[j] -= c * P[u]
            for u in set(batch.users.tolist()):
                gP[u] += 2 * l2 * P[u]
            for i in set(batch.pos.tolist()) | set(batch.neg.tolist()):
                gQ[i] += 2 * l2 * Q[i]
            step += 1
            for W, m, v, g in ((P, mP, vP, gP), (Q, mQ, vQ, gQ)):
                for r in range(len(W)):
                    if not g[r].any():
                        continue
                    m[r] = 0.9 * m[r] + 0.1 * g[r]
                    v[r] = 0.999 * v[r] + 0.001 * g[r] ** 2
                    W[r] -= lr * (m[r] / (1 - 0.9 ** step)) / (np.sqrt(v[r] / (1 - 0.999 ** step)) + 1e-8)
    return P, Q
