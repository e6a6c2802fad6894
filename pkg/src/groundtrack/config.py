"""Flat ``key = value`` run configuration with schema validation.

Keys are dotted by section (``world.num_objects = 4``, ``train.steps = 500``).
Unknown keys are rejected. Environment variables only override the thread
count (``GROUNDTRACK_THREADS``).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterable, List, Tuple

from .evalkit import Protocol
from .model import FLAVORS, ModelConfig
from .synthworld import WorldConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_episodes: int = 2000
    val_episodes: int = 200
    train_seed_offset: int = 0
    val_seed_offset: int = 1_000_000


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "nl_only"
    plots: bool = True


@dataclass(frozen=True)
class RuntimeConfig:
    threads: int = 1


@dataclass(frozen=True)
class AblateConfig:
    flavors: Tuple[str, ...] = FLAVORS


SECTIONS = {
    "world": WorldConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "runtime": RuntimeConfig,
    "ablate": AblateConfig,
}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if default and isinstance(default[0], float):
            return tuple(float(s) for s in items)
        return tuple(items)
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self) -> "RunConfig":
        try:
            self.world.validate()
            self.model.validate()
            Protocol(self.eval.protocol)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.model.search_size != self.world.frame_size:
            raise ConfigError("model.search_size must equal world.frame_size")
        if self.model.patch_size != self.world.patch_size:
            raise ConfigError("model.patch_size must equal world.patch_size")
        bad = [f for f in self.ablate.flavors if f not in FLAVORS]
        if bad:
            raise ConfigError(f"unknown flavors {bad}")
        if self.runtime.threads < 1:
            raise ConfigError("runtime.threads must be >= 1")
        return self

    def to_flat(self) -> Dict[str, object]:
        out = {}
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                out[f"{sec}.{f.name}"] = getattr(obj, f.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.to_flat().items())

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.to_flat().items()}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, pairs: Iterable[Tuple[str, str]]) -> "RunConfig":
        updates: Dict[str, Dict[str, object]] = {}
        for key, raw in pairs:
            sec, _, name = key.partition(".")
            if sec not in SECTIONS or not name:
                raise ConfigError(f"unknown key {key!r}")
            obj = getattr(self, sec)
            names = {f.name: f for f in fields(obj)}
            if name not in names:
                raise ConfigError(f"unknown key {key!r}")
            try:
                value = raw if not isinstance(raw, str) else _parse_value(raw, getattr(obj, name))
            except ValueError as e:
                raise ConfigError(f"{key}: {e}") from None
            updates.setdefault(sec, {})[name] = value
        new = {sec: replace(getattr(self, sec), **kv) for sec, kv in updates.items()}
        return replace(self, **new).validate()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        pairs: List[Tuple[str, str]] = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            k, v = line.split("=", 1)
            pairs.append((k.strip(), v.strip()))
        return cls().with_overrides(pairs)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path) as f:
            return cls.from_text(f.read())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls().with_overrides((k, v if not isinstance(v, list) else tuple(v)) for k, v in d.items())

    def threads(self) -> int:
        env = os.environ.get("GROUNDTRACK_THREADS")
        return int(env) if env else self.runtime.threads
