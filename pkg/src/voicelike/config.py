"""JSON run configuration with full defaults.

Every section mirrors one library dataclass; unknown keys anywhere are
rejected so typos fail loudly instead of being silently ignored.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import converter as conv
from .audio import MelConfig
from .errors import ConfigError
from .evalharness import TARGET_GRID, config_hash
from .predictor import TrainConfig


@dataclass(frozen=True)
class UnitsConfig:
    k: int = 100
    batch_size: int = 1024
    iterations: int | None = None
    seed: int = 0
    n_init: int = 10

    def __post_init__(self):
        if (self.k < 1 or self.batch_size < 1 or self.n_init < 1
                or (self.iterations is not None and self.iterations < 1)):
            raise ValueError("k, batch_size, n_init and iterations must be positive")


@dataclass(frozen=True)
class ScaleConfig:
    train: float = conv.TRAIN_SCALE
    inference: float = conv.INFERENCE_SCALE


@dataclass(frozen=True)
class EvalConfig:
    targets: tuple = TARGET_GRID
    liked_threshold: float = 0.0
    vocoder_iterations: int = 60


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    mel: MelConfig = field(default_factory=MelConfig)
    predictor: TrainConfig = field(default_factory=TrainConfig)
    units: UnitsConfig = field(default_factory=UnitsConfig)
    converter: conv.ConverterConfig = field(default_factory=conv.ConverterConfig)
    converter_train: conv.ConverterTrainConfig = field(default_factory=conv.ConverterTrainConfig)
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{where}.{name}")
        elif typing.get_origin(hint) is tuple or hint is tuple:
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load_config(path=None) -> RunConfig:
    """Read a JSON config; ``None`` gives the all-defaults configuration."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)
