"""All-ranking top-K evaluation: recall@K and NDCG@K over every non-training item."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .graph import InteractionGraph
from .model import final_embeddings
from .sampler import full_layer_adjacency


@dataclass
class RankingReport:
    split: str
    cutoffs: list[int]
    recall: dict[int, float]
    ndcg: dict[int, float]
    num_users_evaluated: int
    per_user: list[dict] = field(default=None)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["recall"] = {str(k): v for k, v in self.recall.items()}
        out["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        if self.per_user is None:
            del out["per_user"]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def recall_at_k(ranked: Sequence[int], test: Sequence[int], k: int) -> float:
    test = set(int(x) for x in test)
    if not test:
        raise ValueError("recall undefined for an empty test set")
    hits = sum(1 for item in list(ranked)[:k] if int(item) in test)
    return hits / len(test)


def ndcg_at_k(ranked: Sequence[int], test: Sequence[int], k: int) -> float:
    """Binary-relevance NDCG with a log2(rank + 1) discount."""
    test = set(int(x) for x in test)
    if not test:
        raise ValueError("NDCG undefined for an empty test set")
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(list(ranked)[:k]) if int(item) in test)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(test))))
    return dcg / idcg


def rank_all(user: int, final_user: np.ndarray, final_item: np.ndarray, graph: InteractionGraph) -> np.ndarray:
    """Every non-training item for ``user``, best score first, ties by item id."""
    candidates = np.setdiff1d(np.arange(graph.num_items), graph.train_adj_user[user])
    scores = final_item[candidates] @ final_user[user]
    return candidates[np.lexsort((candidates, -scores))]


def _top_lists(final_user, final_item, graph, users, depth, chunk=1024):
    """Top-``depth`` ranked candidates for each user (same order as rank_all)."""
    out = []
    for start in range(0, len(users), chunk):
        batch = users[start:start + chunk]
        scores = final_user[batch] @ final_item.T
        train = graph.train_adj_user
        for r, u in enumerate(batch):
            scores[r, train[u]] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")[:, :depth]
        for r, u in enumerate(batch):
            n_cand = graph.num_items - len(train[u])
            out.append(order[r, :min(depth, n_cand)])
    return out


def evaluate_embeddings(final_user: np.ndarray, final_item: np.ndarray, graph: InteractionGraph,
                        cutoffs: Sequence[int] = (20,), split: str = "test", per_user: bool = False) -> RankingReport:
    cutoffs = sorted(int(k) for k in cutoffs)
    targets = graph.split_positives(split)
    users = np.flatnonzero(targets.degrees())
    ranked = _top_lists(final_user, final_item, graph, users, max(cutoffs)) if len(users) else []
    sums_r = {k: 0.0 for k in cutoffs}
    sums_n = {k: 0.0 for k in cutoffs}
    records = []
    for u, top in zip(users, ranked):
        test = targets[u]
        for k in cutoffs:
            sums_r[k] += recall_at_k(top, test, k)
            sums_n[k] += ndcg_at_k(top, test, k)
        if per_user:
            tset = set(test.tolist())
            ranks = [r + 1 for r, item in enumerate(top.tolist()) if item in tset]
            records.append({"user": int(u), "hits": len(ranks), "rank_positions": ranks})
    n = len(users)
    return RankingReport(
        split="validation" if split == "val" else split,
        cutoffs=cutoffs,
        recall={k: (sums_r[k] / n if n else 0.0) for k in cutoffs},
        ndcg={k: (sums_n[k] / n if n else 0.0) for k in cutoffs},
        num_users_evaluated=int(n),
        per_user=records if per_user else None,
    )


def evaluate(checkpoint, graph: InteractionGraph, cutoffs: Sequence[int] = (20,), split: str = "test",
             per_user: bool = False) -> RankingReport:
    """Full-graph forward of ``checkpoint`` then all-ranking metrics on ``split``."""
    table, config = checkpoint.table, checkpoint.config
    if table.num_users != graph.num_users or table.num_items != graph.num_items:
        raise ValueError(
            f"checkpoint has {table.num_users} users / {table.num_items} items, "
            f"graph has {graph.num_users} / {graph.num_items}"
        )
    fu, fi = final_embeddings(table, full_layer_adjacency(graph, config.num_layers), config, checkpoint.ablation)
    return evaluate_embeddings(fu, fi, graph, cutoffs, split, per_user)


def random_recall_baseline(graph: InteractionGraph, k: int = 20, split: str = "test") -> float:
    """Expected recall@k of a uniformly random ranking, averaged like the real metric."""
    targets = graph.split_positives(split)
    users = np.flatnonzero(targets.degrees())
    if not len(users):
        return 0.0
    candidates = graph.num_items - graph.train_adj_user.degrees()[users]
    return float(np.mean(np.minimum(k, candidates) / candidates))
