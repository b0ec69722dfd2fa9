"""Experiment configuration: nested dataclasses loaded from YAML with strict keys.

Every default is written back into ``config.snapshot`` so a run directory
describes itself; loading the snapshot reproduces the same parameters.
"""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .graph import HeadSpec
from .surgery import StrategyConfig
from .synthetic import PretrainSpec, SyntheticTaskSpec
from .training import TrainConfig

DEVICE_ENV = "DIFFTL_DEVICE"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Backbone source: a saved checkpoint, synthetic pretraining, or a zoo constructor."""

    name: str = "mini_resnet"
    options: dict = field(default_factory=dict)
    checkpoint: str | None = None
    pretrain: PretrainSpec | None = None
    cache_dir: str | None = None


@dataclass
class DataConfig:
    manifest: str | None = None
    synthetic: SyntheticTaskSpec | None = None
    split_seed: int = 0
    image_size: int = 224
    channels: int = 3
    probe_images: int = 200


@dataclass
class SvccaConfig:
    variance_keep: float = 0.99
    ridge: float = 0.0
    baseline_seeds: int = 5
    tau: float = 0.05
    max_rows: int | None = 20000


@dataclass
class SearchConfig:
    stage: str = "both"
    lwft_min_delta: float = 0.002
    lwft_patience: int = 2


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    svcca: SvccaConfig = field(default_factory=SvccaConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    out: str = "runs/experiment"

    def validate(self, base: Path | None = None) -> "ExperimentConfig":
        base = base or Path.cwd()
        if (self.data.manifest is None) == (self.data.synthetic is None):
            raise ConfigError("data needs exactly one of 'manifest' or 'synthetic'")
        for label, p in (("data.manifest", self.data.manifest), ("model.checkpoint", self.model.checkpoint)):
            if p is not None and not _resolve(p, base).exists():
                raise ConfigError(f"{label}: {p} does not exist")
        if not 0 < self.svcca.variance_keep <= 1:
            raise ConfigError("svcca.variance_keep must lie in (0, 1]")
        if not 0 <= self.svcca.tau <= 1:
            raise ConfigError("svcca.tau must lie in [0, 1]")
        if self.search.stage not in ("1", "2", "both"):
            raise ConfigError("search.stage must be '1', '2' or 'both'")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def snapshot(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _resolve(p: str, base: Path) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _unwrap_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def _build(cls, data, where: str):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        tp = _unwrap_optional(hints[key])
        if dataclasses.is_dataclass(tp) and value is not None:
            value = _build(tp, value, f"{where}.{key}")
        elif typing.get_origin(tp) is tuple and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def config_from_dict(data: dict | None, base: Path | None = None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {}, "config")
    device = os.environ.get(DEVICE_ENV)
    if device:
        cfg.training.device = device
    return cfg.validate(base)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return config_from_dict(yaml.safe_load(path.read_text()), path.parent)


def save_snapshot(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.snapshot"
    path.write_text(cfg.snapshot())
    return path


__all__ = [
    "ConfigError", "DataConfig", "ExperimentConfig", "HeadSpec", "ModelConfig", "SearchConfig",
    "SvccaConfig", "config_from_dict", "load_config", "save_snapshot",
]
