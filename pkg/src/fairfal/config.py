"""Experiment configuration: dataclasses, JSON loading and ``key.path=value`` overrides."""

from __future__ import annotations

import dataclasses
import enum
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from fairfal.pipeline import FairFALConfig
from fairfal.strategies import parse_strategy


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    kind: str = "blobs"  # "blobs" or "csv"
    num_classes: int = 10
    per_class: int = 500
    test_per_class: int = 100
    dim: int = 16
    separation: float = 4.0
    path: Optional[str] = None
    long_tail_profile: str = "exp"


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 10
    alpha: float = 100.0
    rho: float = 20.0


@dataclass(frozen=True)
class ModelConfig:
    hidden: Optional[int] = 32


@dataclass(frozen=True)
class TrainingConfig:
    comm_rounds: int = 100
    local_epochs: int = 5
    local_model_epochs: Optional[int] = None
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    lr_decay_round: Optional[int] = 75
    lr_decay_factor: float = 0.1
    warm_start: bool = False
    local_model: str = "scratch"  # "scratch" or "participant"


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    fairfal: FairFALConfig = field(default_factory=FairFALConfig)
    strategy: str = "fairfal"
    al_cycles: int = 9
    per_cycle_fraction: float = 0.05
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    output_dir: str = "runs"
    threads: int = 1

    def validate(self) -> "ExperimentConfig":
        checks = [
            ("al_cycles", self.al_cycles >= 1, "must be >= 1"),
            ("per_cycle_fraction", 0 < self.per_cycle_fraction <= 1, "must be in (0, 1]"),
            ("seeds", len(self.seeds) > 0, "must be non-empty"),
            ("seeds", all(s >= 0 for s in self.seeds), "must be non-negative"),
            ("data.kind", self.data.kind in ("blobs", "csv"), "must be 'blobs' or 'csv'"),
            ("data.path", self.data.kind != "csv" or bool(self.data.path), "required when data.kind is 'csv'"),
            ("partition.num_clients", self.partition.num_clients >= 1, "must be >= 1"),
            ("partition.alpha", self.partition.alpha > 0, "must be > 0"),
            ("partition.rho", self.partition.rho >= 1, "must be >= 1"),
            ("model.hidden", self.model.hidden is None or self.model.hidden >= 1, "must be null or >= 1"),
            ("training.comm_rounds", self.training.comm_rounds >= 1, "must be >= 1"),
            ("training.local_epochs", self.training.local_epochs >= 1, "must be >= 1"),
            ("training.local_model", self.training.local_model in ("scratch", "participant"),
             "must be 'scratch' or 'participant'"),
            ("threads", self.threads >= 0, "must be >= 0"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}")
        try:
            parse_strategy(self.strategy)
        except ValueError as exc:
            raise ConfigError(f"strategy: {exc}") from None
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return _build(tp, value, path + ".")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(f"{path}: expected one of {[e.value for e in tp]}, got {value!r}") from None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}{key}: unknown key")
    kwargs = {k: _coerce(hints[k], v, prefix + k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    return _build(ExperimentConfig, data).validate()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r}: expected key.path=value")
        node = out
        parts = key.split(".")
        for i, part in enumerate(parts[:-1]):
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"{'.'.join(parts[: i + 1])}: not a mapping")
            node = nxt
        node[parts[-1]] = _parse_value(raw)
    return out


def load_config(path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(apply_overrides(data, overrides or []))


def with_changes(cfg: ExperimentConfig, **kw: Any) -> ExperimentConfig:
    return dataclasses.replace(cfg, **kw).validate()
