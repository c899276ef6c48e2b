"""Interaction loading, k-core filtering, splitting and the binary graph snapshot."""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SNAPSHOT_MAGIC = b"NGIG"
SNAPSHOT_VERSION = 1


class InteractionFormatError(ValueError):
    """Raised for unparseable interaction files."""


class GraphVanishedError(RuntimeError):
    """Raised when k-core filtering removes every edge."""


@dataclass(frozen=True)
class Adjacency:
    """Row-compressed neighbor lists: row ``n`` is ``indices[indptr[n]:indptr[n+1]]``."""

    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_edges(cls, rows: np.ndarray, cols: np.ndarray, num_rows: int) -> "Adjacency":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        order = np.lexsort((cols, rows))
        counts = np.bincount(rows, minlength=num_rows)
        indptr = np.zeros(num_rows + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(indptr, cols[order])

    @classmethod
    def from_lists(cls, lists) -> "Adjacency":
        lengths = np.array([len(x) for x in lists], dtype=np.int64)
        indptr = np.zeros(len(lists) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        if len(lists) and indptr[-1]:
            indices = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists])
        else:
            indices = np.zeros(0, dtype=np.int64)
        return cls(indptr, indices)

    def __len__(self) -> int:
        return len(self.indptr) - 1

    def __getitem__(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node]:self.indptr[node + 1]]

    @property
    def num_edges(self) -> int:
        return int(self.indptr[-1])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def rows(self) -> np.ndarray:
        """Row id of every stored entry, aligned with ``indices``."""
        return np.repeat(np.arange(len(self), dtype=np.int64), self.degrees())

    def transpose(self, num_cols: int) -> "Adjacency":
        return Adjacency.from_edges(self.indices, self.rows(), num_cols)

    def to_lists(self) -> list[list[int]]:
        return [self[n].tolist() for n in range(len(self))]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Adjacency):
            return NotImplemented
        return np.array_equal(self.indptr, other.indptr) and np.array_equal(self.indices, other.indices)

    __hash__ = None


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    validation_fraction_of_train: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("train_fraction", "validation_fraction_of_train"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")


@dataclass(frozen=True)
class EdgeList:
    """Densified edges plus the original ids behind each dense id."""

    edges: np.ndarray  # (E, 2) dense (user, item)
    user_ids: np.ndarray  # dense user id -> original id
    item_ids: np.ndarray

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    num_users: int
    num_items: int
    train_adj_user: Adjacency
    train_adj_item: Adjacency
    val_pos: Adjacency
    test_pos: Adjacency

    @classmethod
    def from_splits(cls, num_users, num_items, train, val, test) -> "InteractionGraph":
        """Build from per-split ``(users, items)`` array pairs."""
        train_u = Adjacency.from_edges(*train, num_users)
        return cls(
            num_users,
            num_items,
            train_u,
            train_u.transpose(num_items),
            Adjacency.from_edges(*val, num_users),
            Adjacency.from_edges(*test, num_users),
        )

    @property
    def num_train_edges(self) -> int:
        return self.train_adj_user.num_edges

    def train_edges(self) -> np.ndarray:
        return np.stack([self.train_adj_user.rows(), self.train_adj_user.indices], axis=1)

    def split_positives(self, split: str) -> Adjacency:
        if split in ("validation", "val"):
            return self.val_pos
        if split == "test":
            return self.test_pos
        if split == "train":
            return self.train_adj_user
        raise ValueError(f"unknown split {split!r}")

    def to_bytes(self) -> bytes:
        parts = [SNAPSHOT_MAGIC, struct.pack("<III", SNAPSHOT_VERSION, self.num_users, self.num_items)]
        for adj in (self.train_adj_user, self.val_pos, self.test_pos):
            degrees = adj.degrees()
            for u in range(self.num_users):
                parts.append(struct.pack("<I", degrees[u]))
                parts.append(adj[u].astype("<u4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "InteractionGraph":
        if blob[:4] != SNAPSHOT_MAGIC:
            raise ValueError("not a graph snapshot (bad magic)")
        version, num_users, num_items = struct.unpack_from("<III", blob, 4)
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        offset = 16
        sections = []
        for _ in range(3):
            lists = []
            for _ in range(num_users):
                (n,) = struct.unpack_from("<I", blob, offset)
                offset += 4
                lists.append(np.frombuffer(blob, dtype="<u4", count=n, offset=offset).astype(np.int64))
                offset += 4 * n
            sections.append(Adjacency.from_lists(lists))
        if offset != len(blob):
            raise ValueError("trailing bytes in graph snapshot")
        train, val, test = sections
        return cls(num_users, num_items, train, train.transpose(num_items), val, test)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "InteractionGraph":
        return cls.from_bytes(Path(path).read_bytes())


def load_interactions(path, format: str = "pairs") -> np.ndarray:
    """Read a whitespace-delimited interaction file into unique ``(user, item)`` rows.

    ``pairs`` expects one ``user item`` per line; ``adjacency`` expects
    ``user item1 item2 ...``. Blank lines are skipped. Original ids are kept.
    """
    if format not in ("pairs", "adjacency"):
        raise ValueError(f"unknown interaction format {format!r}")
    users: list[int] = []
    items: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            try:
                ids = [int(tok) for tok in fields]
            except ValueError:
                raise InteractionFormatError(f"{path}:{lineno}: non-integer token in {line.strip()!r}") from None
            if any(x < 0 for x in ids):
                raise InteractionFormatError(f"{path}:{lineno}: negative id")
            if format == "pairs":
                if len(ids) != 2:
                    raise InteractionFormatError(f"{path}:{lineno}: expected 2 fields, got {len(ids)}")
                users.append(ids[0])
                items.append(ids[1])
            else:
                users.extend([ids[0]] * (len(ids) - 1))
                items.extend(ids[1:])
    if not users:
        warnings.warn(f"{path}: no interactions found", stacklevel=2)
        return np.zeros((0, 2), dtype=np.int64)
    edges = np.unique(np.stack([users, items], axis=1).astype(np.int64), axis=0)
    return edges


def densify(edges: np.ndarray) -> EdgeList:
    """Relabel users and items to contiguous ids in ascending original-id order."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    user_ids, users = np.unique(edges[:, 0], return_inverse=True)
    item_ids, items = np.unique(edges[:, 1], return_inverse=True)
    dense = np.unique(np.stack([users, items], axis=1).astype(np.int64), axis=0)
    return EdgeList(dense, user_ids, item_ids)


def apply_k_core(edges: np.ndarray, k: int = 10) -> EdgeList:
    """Drop users and items of degree < k until every survivor has degree >= k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    edges = np.unique(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=0)
    while len(edges):
        _, uinv, ucount = np.unique(edges[:, 0], return_inverse=True, return_counts=True)
        _, iinv, icount = np.unique(edges[:, 1], return_inverse=True, return_counts=True)
        keep = (ucount[uinv] >= k) & (icount[iinv] >= k)
        if keep.all():
            break
        edges = edges[keep]
    if not len(edges):
        raise GraphVanishedError(f"graph vanished under {k}-core filtering")
    return densify(edges)


def split_counts(degree: int, train_fraction: float = 0.8, val_fraction: float = 0.1) -> tuple[int, int, int]:
    """Return ``(train, validation, test)`` sizes for a user with ``degree`` items."""
    if degree <= 0:
        return 0, 0, 0
    train = max(1, math.floor(train_fraction * degree))
    test = degree - train
    val = max(1, math.floor(val_fraction * train)) if train >= 2 else 0
    return train - val, val, test


def split(edges, spec: SplitSpec = SplitSpec()) -> InteractionGraph:
    """Per-user random partition into train / validation / test.

    Accepts an :class:`EdgeList` or a dense ``(E, 2)`` array. Users are
    visited in ascending id order with a single generator, so the result
    depends only on the edges and ``spec.rng_seed``.
    """
    if isinstance(edges, EdgeList):
        num_users, num_items, arr = edges.num_users, edges.num_items, edges.edges
    else:
        arr = np.unique(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=0)
        num_users = int(arr[:, 0].max()) + 1 if len(arr) else 0
        num_items = int(arr[:, 1].max()) + 1 if len(arr) else 0
    by_user = Adjacency.from_edges(arr[:, 0], arr[:, 1], num_users)
    rng = np.random.default_rng(spec.rng_seed)
    buckets = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for u in range(num_users):
        items = by_user[u]
        n_train, n_val, n_test = split_counts(len(items), spec.train_fraction, spec.validation_fraction_of_train)
        perm = items[rng.permutation(len(items))]
        parts = {
            "train": perm[:n_train],
            "val": perm[n_train:n_train + n_val],
            "test": perm[n_train + n_val:],
        }
        for name, chosen in parts.items():
            buckets[name][0].append(np.full(len(chosen), u, dtype=np.int64))
            buckets[name][1].append(chosen)

    def cat(pair):
        if not pair[0]:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        return np.concatenate(pair[0]), np.concatenate(pair[1])

    return InteractionGraph.from_splits(
        num_users, num_items, cat(buckets["train"]), cat(buckets["val"]), cat(buckets["test"])
    )
