"""Flat ``key=value`` run configuration mapped onto the model, trainer and sampler configs."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .model import ModelConfig
from .sampler import SamplerConfig
from .trainer import TrainConfig

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(field: dataclasses.Field, value: str):
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", str(field.type))
    if kind == "bool":
        try:
            return _BOOL[value.lower()]
        except KeyError:
            raise ConfigError(f"{field.name}: not a boolean: {value!r}") from None
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind.startswith("tuple"):
        return tuple(int(x) for x in value.replace(" ", "").split(",") if x)
    return value


def build_configs(values: dict[str, str]) -> tuple[ModelConfig, TrainConfig, SamplerConfig]:
    """Split one flat mapping into the three config objects.

    ``rng_seed`` seeds both training and sampling. A missing
    ``max_neighbors_per_hop`` defaults to 120 for every layer.
    """
    known = {}
    for cls in (ModelConfig, TrainConfig, SamplerConfig):
        for f in dataclasses.fields(cls):
            known.setdefault(f.name, []).append((cls, f))
    kwargs = {ModelConfig: {}, TrainConfig: {}, SamplerConfig: {}}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        for cls, f in known[key]:
            try:
                kwargs[cls][key] = _coerce(f, value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
    model = ModelConfig(**kwargs[ModelConfig])
    train = TrainConfig(**kwargs[TrainConfig])
    sampler_kwargs = kwargs[SamplerConfig]
    sampler_kwargs.setdefault("max_neighbors_per_hop", (120,) * model.num_layers)
    sampler = SamplerConfig(**sampler_kwargs)
    return model, train, sampler


def load_config(path) -> tuple[ModelConfig, TrainConfig, SamplerConfig]:
    return build_configs(parse_kv(Path(path).read_text(encoding="utf-8")))


def dump_config(model: ModelConfig, train: TrainConfig, sampler: SamplerConfig) -> str:
    lines = []
    seen = set()
    for obj in (model, train, sampler):
        for f in dataclasses.fields(obj):
            if f.name in seen:
                continue
            seen.add(f.name)
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"
