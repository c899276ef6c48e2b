"""Binary checkpoint: header, float32 rows, optional variant weights, CRC32 trailer."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import VARIANTS, AblationParams, EmbeddingTable, ModelConfig, ablation_keys

MAGIC = b"NGAT"
VERSION = 1
_NO_SELF_FLAG = 0x80


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    table: EmbeddingTable
    ablation: AblationParams = None

    def to_bytes(self) -> bytes:
        cfg, t = self.config, self.table
        tag = VARIANTS.index(cfg.aggregator_variant) | (0 if cfg.include_self else _NO_SELF_FLAG)
        parts = [
            MAGIC,
            struct.pack("<IIIII", VERSION, t.num_users, t.num_items, t.dim, cfg.num_layers),
            struct.pack("<B", tag),
            np.ascontiguousarray(t.user_rows, dtype="<f4").tobytes(),
            np.ascontiguousarray(t.item_rows, dtype="<f4").tobytes(),
        ]
        for key, shape in ablation_keys(cfg.aggregator_variant, cfg.num_layers, t.dim):
            w = self.ablation.weights[key]
            if w.shape != shape:
                raise CheckpointError(f"{key} has shape {w.shape}, expected {shape}")
            parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, blob: bytes, dtype: str = "float32") -> "Checkpoint":
        if len(blob) < 29 or blob[:4] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError("checkpoint CRC mismatch")
        version, n_users, n_items, dim, layers = struct.unpack_from("<IIIII", body, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (tag,) = struct.unpack_from("<B", body, 24)
        if tag & ~_NO_SELF_FLAG >= len(VARIANTS):
            raise CheckpointError(f"unknown variant tag {tag:#x}")
        variant = VARIANTS[tag & ~_NO_SELF_FLAG]
        config = ModelConfig(dim, layers, variant, include_self=not (tag & _NO_SELF_FLAG), dtype=dtype)
        offset = 25
        expected = offset + 4 * dim * (n_users + n_items)
        expected += sum(4 * int(np.prod(shape)) for _, shape in ablation_keys(variant, layers, dim))
        if expected != len(body):
            raise CheckpointError("checkpoint length does not match its header")

        def take(shape):
            nonlocal offset
            count = int(np.prod(shape))
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(shape)
            offset += 4 * count
            return arr.astype(dtype)

        users = take((n_users, dim))
        items = take((n_items, dim))
        weights = {key: take(shape) for key, shape in ablation_keys(variant, layers, dim)}
        return cls(config, EmbeddingTable(users, items), AblationParams(weights) if weights else None)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, dtype: str = "float32") -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), dtype)
