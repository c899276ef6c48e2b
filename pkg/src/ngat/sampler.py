"""Max-M sub-graph sampling: per hop, cap every node's neighbor list without duplicates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import Adjacency, InteractionGraph

USER_SIDE = 0
ITEM_SIDE = 1


@dataclass(frozen=True)
class SamplerConfig:
    max_neighbors_per_hop: tuple[int, ...] = (120, 120, 120)
    rng_seed: int = 0
    resample_policy: str = "per_epoch"

    def __post_init__(self):
        object.__setattr__(self, "max_neighbors_per_hop", tuple(int(m) for m in self.max_neighbors_per_hop))
        if any(m < 1 for m in self.max_neighbors_per_hop):
            raise ValueError("every per-hop cap must be >= 1")
        if self.resample_policy != "per_epoch":
            raise ValueError(f"unsupported resample_policy {self.resample_policy!r}")

    @property
    def num_hops(self) -> int:
        return len(self.max_neighbors_per_hop)


@dataclass(frozen=True)
class SampledSubgraph:
    """``hops[k]`` holds the (user-side, item-side) capped adjacency for hop ``k + 1``."""

    hops: tuple[tuple[Adjacency, Adjacency], ...]

    @property
    def num_hops(self) -> int:
        return len(self.hops)

    def layer_adjacency(self) -> list[tuple[Adjacency, Adjacency]]:
        """Adjacency per propagation layer, first layer first.

        Layer ``K`` is the last aggregation before scoring, i.e. one hop out
        from the scored node, so it uses hop 1; layer 1 uses hop ``K``.
        """
        return list(reversed(self.hops))

    def edge_counts(self) -> list[dict[str, int]]:
        return [
            {"hop": k + 1, "user_side_edges": u.num_edges, "item_side_edges": i.num_edges}
            for k, (u, i) in enumerate(self.hops)
        ]


def node_stream(seed: int, epoch: int, node: int, side: int, hop: int) -> np.random.Generator:
    """Independent generator for one node's draw; independent of visiting order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch, side, hop, node])))


def partial_shuffle(values: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """First ``m`` entries of a Fisher-Yates shuffle of a copy of ``values``."""
    out = np.array(values, copy=True)
    n = len(out)
    draws = rng.random(m)
    for t in range(m):
        j = t + int(draws[t] * (n - t))
        out[t], out[j] = out[j], out[t]
    return out[:m]


def cap_adjacency(adj: Adjacency, cap: int, seed: int, epoch: int, side: int, hop: int) -> Adjacency:
    degrees = adj.degrees()
    if degrees.size == 0 or degrees.max() <= cap:
        return adj
    lists: list[np.ndarray] = []
    for node in range(len(adj)):
        neigh = adj[node]
        if len(neigh) <= cap:
            lists.append(neigh)
        else:
            kept = partial_shuffle(neigh, cap, node_stream(seed, epoch, node, side, hop))
            lists.append(np.sort(kept))
    return Adjacency.from_lists(lists)


def sample_subgraph(graph: InteractionGraph, config: SamplerConfig, epoch: int = 0) -> SampledSubgraph:
    if graph.num_train_edges == 0:
        raise ValueError("cannot sample from a graph without training edges")
    hops = []
    for hop, cap in enumerate(config.max_neighbors_per_hop, start=1):
        hops.append((
            cap_adjacency(graph.train_adj_user, cap, config.rng_seed, epoch, USER_SIDE, hop),
            cap_adjacency(graph.train_adj_item, cap, config.rng_seed, epoch, ITEM_SIDE, hop),
        ))
    return SampledSubgraph(tuple(hops))


def full_layer_adjacency(graph: InteractionGraph, num_layers: int) -> list[tuple[Adjacency, Adjacency]]:
    """Unsampled training adjacency repeated for every layer (evaluation path)."""
    return [(graph.train_adj_user, graph.train_adj_item)] * num_layers


def sample_stats(graph: InteractionGraph, caps: Sequence[int], seed: int, epoch: int = 0) -> dict:
    sub = sample_subgraph(graph, SamplerConfig(tuple(caps), seed), epoch)
    return {
        "num_users": graph.num_users,
        "num_items": graph.num_items,
        "train_edges": graph.num_train_edges,
        "epoch": epoch,
        "hops": sub.edge_counts(),
    }
