"""BPR training loop: negative sampling, mini-batches, sparse Adam, early stopping."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .checkpoint import Checkpoint
from .evaluator import evaluate_embeddings
from .graph import InteractionGraph
from .model import (
    AblationParams,
    EmbeddingTable,
    Gradients,
    ModelConfig,
    backward,
    final_embeddings,
    forward,
    init_ablation_params,
    init_embeddings,
)
from .sampler import SamplerConfig, full_layer_adjacency, sample_subgraph

log = logging.getLogger(__name__)

LOSS_FORMS = ("standard_bpr", "paper_literal")


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or parameters."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0005
    batch_size: int = 8192
    l2_lambda: float = 1e-4
    max_epochs: int = 1000
    eval_every: int = 10
    early_stop_patience: int = 5
    rng_seed: int = 0
    loss_form: str = "standard_bpr"
    record_wall_time: bool = False
    debug: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.eval_every < 1 or self.early_stop_patience < 1:
            raise ValueError("batch_size, eval_every and early_stop_patience must be >= 1")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.loss_form not in LOSS_FORMS:
            raise ValueError(f"loss_form must be one of {LOSS_FORMS}")


@dataclass(frozen=True)
class MiniBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


# ---------------------------------------------------------------------------
# Sampling


def _train_codes(graph: InteractionGraph) -> np.ndarray:
    adj = graph.train_adj_user
    return adj.rows() * graph.num_items + adj.indices  # sorted: rows ascending, items sorted per row


def sample_negatives(graph: InteractionGraph, users: np.ndarray, rng: np.random.Generator,
                     codes: np.ndarray = None) -> np.ndarray:
    """One uniform non-training item per user, by rejection. Users owning every item get -1."""
    codes = _train_codes(graph) if codes is None else codes
    neg = np.full(len(users), -1, dtype=np.int64)
    full = graph.train_adj_user.degrees()[users] >= graph.num_items
    todo = np.flatnonzero(~full)
    while len(todo):
        draw = rng.integers(0, graph.num_items, size=len(todo))
        key = users[todo] * graph.num_items + draw
        pos = np.searchsorted(codes, key)
        taken = (pos < len(codes)) & (codes[np.minimum(pos, len(codes) - 1)] == key)
        neg[todo[~taken]] = draw[~taken]
        todo = todo[taken]
    return neg


def sample_batches(graph: InteractionGraph, batch_size: int, rng: np.random.Generator) -> Iterator[MiniBatch]:
    """One epoch: every training edge once, in shuffled order, with a fresh negative each."""
    if graph.num_train_edges == 0:
        raise ValueError("graph has no training edges")
    edges = graph.train_edges()
    codes = _train_codes(graph)
    order = rng.permutation(len(edges))
    for start in range(0, len(order), batch_size):
        chunk = edges[order[start:start + batch_size]]
        users, pos = chunk[:, 0], chunk[:, 1]
        neg = sample_negatives(graph, users, rng, codes)
        keep = neg >= 0
        if not keep.all():
            warnings.warn(f"skipping {int((~keep).sum())} pairs of users that own every item", stacklevel=2)
            users, pos, neg = users[keep], pos[keep], neg[keep]
        if len(users):
            yield MiniBatch(users, pos, neg)


def sample_batch(graph: InteractionGraph, batch_size: int, rng: np.random.Generator) -> MiniBatch:
    """First batch of a freshly shuffled epoch."""
    return next(sample_batches(graph, batch_size, rng))


# ---------------------------------------------------------------------------
# Loss


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-_softplus(-x))


def touched_rows(batch: MiniBatch) -> tuple[np.ndarray, np.ndarray]:
    return np.unique(batch.users), np.unique(np.concatenate([batch.pos, batch.neg]))


def l2_penalty(table: EmbeddingTable, batch: MiniBatch, ablation: AblationParams = None) -> float:
    users, items = touched_rows(batch)
    total = float(np.sum(np.square(table.user_rows[users], dtype=np.float64)))
    total += float(np.sum(np.square(table.item_rows[items], dtype=np.float64)))
    if ablation is not None:
        total += sum(float(np.sum(np.square(w, dtype=np.float64))) for w in ablation.weights.values())
    return total


def bpr_loss(pos_scores: np.ndarray, neg_scores: np.ndarray, l2_lambda: float = 0.0,
             l2_norm_sq: float = 0.0, loss_form: str = "standard_bpr") -> float:
    """Mean pairwise loss plus ``l2_lambda * l2_norm_sq``.

    ``standard_bpr`` is ``softplus(y_uj - y_ui)``; ``paper_literal`` is
    ``-softplus(y_ui - y_uj)``, which has no lower bound.
    """
    diff = np.asarray(pos_scores, dtype=np.float64) - np.asarray(neg_scores, dtype=np.float64)
    if loss_form == "standard_bpr":
        data = _softplus(-diff).mean()
    elif loss_form == "paper_literal":
        data = -_softplus(diff).mean()
    else:
        raise ValueError(f"unknown loss_form {loss_form!r}")
    return float(data + l2_lambda * l2_norm_sq)


def loss_and_gradients(table: EmbeddingTable, layer_adjacency, batch: MiniBatch, model_config: ModelConfig,
                       l2_lambda: float, loss_form: str = "standard_bpr",
                       ablation: AblationParams = None) -> tuple[float, Gradients]:
    """Forward the whole graph, score the batch and backpropagate to layer-0 rows."""
    data, reg, grads = _batch_objective(table, layer_adjacency, batch, model_config, l2_lambda, loss_form, ablation)
    return data + reg, grads


def _batch_objective(table, layer_adjacency, batch, model_config, l2_lambda, loss_form, ablation):
    acts = forward(table, layer_adjacency, model_config, ablation)
    fu, fi = acts.final_user, acts.final_item
    u, i, j = batch.users, batch.pos, batch.neg
    eu, ei, ej = fu[u], fi[i], fi[j]
    y_ui = np.einsum("bd,bd->b", eu, ei)
    y_uj = np.einsum("bd,bd->b", eu, ej)
    data = bpr_loss(y_ui, y_uj, loss_form=loss_form)
    reg = l2_lambda * l2_penalty(table, batch, ablation) if l2_lambda else 0.0
    if not np.isfinite(data + reg):
        raise TrainingDivergedError(f"non-finite loss {data + reg}")
    diff = y_ui.astype(np.float64) - y_uj
    if loss_form == "standard_bpr":
        coef = -_sigmoid(-diff) / len(batch)
    else:
        coef = -_sigmoid(diff) / len(batch)
    coef = coef.astype(fu.dtype)[:, None]
    gfu = np.zeros_like(fu)
    gfi = np.zeros_like(fi)
    np.add.at(gfu, u, coef * (ei - ej))
    np.add.at(gfi, i, coef * eu)
    np.add.at(gfi, j, -coef * eu)
    grads = backward(acts, gfu, gfi, model_config, ablation)
    if l2_lambda:
        users, items = touched_rows(batch)
        grads.user[users] += 2 * l2_lambda * table.user_rows[users]
        grads.item[items] += 2 * l2_lambda * table.item_rows[items]
        for key, w in (ablation.weights.items() if ablation is not None else ()):
            grads.ablation[key] = grads.ablation[key] + 2 * l2_lambda * w
    return data, reg, grads


# ---------------------------------------------------------------------------
# Optimizer


def _adam_rows(param, m, v, grad, rows, lr, step, beta1, beta2, eps):
    g = grad[rows]
    m[rows] = beta1 * m[rows] + (1 - beta1) * g
    v[rows] = beta2 * v[rows] + (1 - beta2) * g * g
    m_hat = m[rows] / (1 - beta1 ** step)
    v_hat = v[rows] / (1 - beta2 ** step)
    param[rows] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(table: EmbeddingTable, grads: Gradients, learning_rate: float, ablation: AblationParams = None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> EmbeddingTable:
    """One in-place Adam update; embedding rows with an all-zero gradient are left alone."""
    if grads.user.shape != table.user_rows.shape or grads.item.shape != table.item_rows.shape:
        raise ValueError("gradient shapes do not match the embedding table")
    table.step += 1
    t = table.step
    for param, m, v, g in ((table.user_rows, table.user_m, table.user_v, grads.user),
                           (table.item_rows, table.item_m, table.item_v, grads.item)):
        rows = np.flatnonzero(np.any(g != 0, axis=1))
        if len(rows):
            _adam_rows(param, m, v, g, rows, learning_rate, t, beta1, beta2, eps)
            if not np.all(np.isfinite(param[rows])):
                raise TrainingDivergedError(f"non-finite embedding after Adam step {t}")
    if ablation is not None:
        for key, w in ablation.weights.items():
            g = grads.ablation.get(key)
            if g is None:
                continue
            flat = w.reshape(-1, 1) if w.ndim == 1 else w
            gflat = g.reshape(flat.shape)
            everything = np.arange(flat.shape[0])
            _adam_rows(flat, ablation.m[key].reshape(flat.shape), ablation.v[key].reshape(flat.shape),
                       gflat, everything, learning_rate, t, beta1, beta2, eps)
            if not np.all(np.isfinite(w)):
                raise TrainingDivergedError(f"non-finite {key} after Adam step {t}")
    return table


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    epoch_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    final_checkpoint: Checkpoint = None


def _snapshot(config, table, ablation) -> Checkpoint:
    return Checkpoint(config, table.copy(), ablation.copy() if ablation is not None else None)


def _validation(table, graph, config, ablation, full_adj):
    fu, fi = final_embeddings(table, full_adj, config, ablation)
    report = evaluate_embeddings(fu, fi, graph, (20,), "validation")
    return report.recall[20], report.ndcg[20]


def train(graph: InteractionGraph, model_config: ModelConfig, train_config: TrainConfig,
          sampler_config: SamplerConfig = None,
          on_evaluation: Callable[[dict], None] = None) -> TrainResult:
    """Run BPR training and return the best-validation checkpoint plus metric history.

    The initial parameters count as the first candidate for "best", so a run
    whose validation recall never improves stops after exactly
    ``early_stop_patience`` evaluations.
    """
    K = model_config.num_layers
    if sampler_config is None:
        sampler_config = SamplerConfig((120,) * K, train_config.rng_seed)
    if K and sampler_config.num_hops != K:
        raise ValueError(f"sampler has {sampler_config.num_hops} hop caps but the model has {K} layers")
    if train_config.loss_form == "paper_literal":
        log.warning("paper_literal loss has no lower bound; use only for fidelity experiments")
    seed = train_config.rng_seed
    table = init_embeddings(graph.num_users, graph.num_items, model_config.embedding_dim, seed, model_config.dtype)
    ablation = init_ablation_params(model_config, seed) if model_config.aggregator_variant in (
        "lightgat_mlp", "ngat_nonlinear") and K else None
    full_adj = full_layer_adjacency(graph, K)
    result = TrainResult(_snapshot(model_config, table, ablation), [])
    if train_config.max_epochs == 0:
        result.final_checkpoint = result.checkpoint
        return result

    best_recall, _ = _validation(table, graph, model_config, ablation, full_adj)
    stale = 0
    started = time.perf_counter()
    for epoch in range(1, train_config.max_epochs + 1):
        layer_adj = sample_subgraph(graph, sampler_config, epoch).layer_adjacency() if K else []
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 2]))
        total, count = 0.0, 0
        for batch in sample_batches(graph, train_config.batch_size, rng):
            if train_config.debug:
                assert not np.any(np.isin(batch.users * graph.num_items + batch.neg, _train_codes(graph)))
            # the recorded curve is the pairwise term alone; L2 is optimised but not logged
            loss, _, grads = _batch_objective(table, layer_adj, batch, model_config, train_config.l2_lambda,
                                              train_config.loss_form, ablation)
            adam_step(table, grads, train_config.learning_rate, ablation)
            total += loss * len(batch)
            count += len(batch)
        epoch_loss = total / count
        result.epoch_losses.append(epoch_loss)
        if epoch % train_config.eval_every:
            continue
        recall, ndcg = _validation(table, graph, model_config, ablation, full_adj)
        entry = {
            "epoch": epoch,
            "train_loss": epoch_loss,
            "val_recall20": recall,
            "val_ndcg20": ndcg,
            "wall_seconds": round(time.perf_counter() - started, 3) if train_config.record_wall_time else None,
        }
        result.history.append(entry)
        log.info("epoch %d loss %.5f val recall@20 %.5f ndcg@20 %.5f", epoch, epoch_loss, recall, ndcg)
        if on_evaluation is not None:
            on_evaluation(entry)
        if recall > best_recall:
            best_recall, stale = recall, 0
            result.checkpoint = _snapshot(model_config, table, ablation)
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= train_config.early_stop_patience:
                result.stopped_early = True
                break
    result.final_checkpoint = _snapshot(model_config, table, ablation)
    return result
