"""Run configuration: one JSON file covering every tunable section.

Unknown keys are rejected with their dotted path.  Missing keys take the
dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .augment import AugmentConfig
from .embeddings import FourierConfig
from .evalmetrics import EvalProtocol
from .losses import LossWeights
from .network import NetworkConfig
from .synthdata import CameraFamily, DatasetConfig, SceneParams
from .trainer import ScheduleConfig


class ConfigError(ValueError):
    pass


def _default_families():
    return (
        CameraFamily("train-A", (80.0, 120.0), ((48, 64),), 2.0),
        CameraFamily("test-B", (150.0, 200.0), ((64, 96),), 2.0),
    )


# Desk-scale defaults: a camera pitched down 0.4 rad keeps the horizon out of
# view so ground depth stays bounded, and the schedule fits in a few minutes
# on one CPU.  Family B is only ever evaluated.
TOY_SCENE = SceneParams(depth_range=(4.0, 16.0), pitch_range=(0.4, 0.4))
TOY_NETWORK = NetworkConfig(d_max=30.0)
TOY_SCHEDULE = ScheduleConfig(lr_init=1e-4, lr_base=1e-3, epochs=15, batch_size=4, query_stride=4, decay_every=3)
TOY_AUGMENT = AugmentConfig(size_multiple=8)
TOY_DATA = DatasetConfig(families=_default_families(), samples_per_family=288, scene=TOY_SCENE, val_fraction=1 / 9)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    network: NetworkConfig = TOY_NETWORK
    fourier: FourierConfig = FourierConfig()
    augment: AugmentConfig = TOY_AUGMENT
    losses: LossWeights = LossWeights()
    schedule: ScheduleConfig = TOY_SCHEDULE
    protocol: EvalProtocol = EvalProtocol()
    data: DatasetConfig = TOY_DATA
    train_labels: tuple = ("train-A",)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build(cls, data: Any, path: str, base=None):
    """Build ``cls`` from ``data``; missing keys keep their values from ``base`` (or the field defaults)."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key {'.'.join(filter(None, [path, unknown[0]]))!r}")
    kwargs = {}
    for name, value in data.items():
        key = ".".join(filter(None, [path, name]))
        default = getattr(base, name) if base is not None else known[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key, default)
        elif cls is DatasetConfig and name == "families":
            if not isinstance(value, list):
                raise ConfigError(f"{key}: expected a list of camera families")
            kwargs[name] = tuple(_build(CameraFamily, fam, f"{key}[{i}]") for i, fam in enumerate(value))
        else:
            kwargs[name] = _tuplify(value)
    try:
        if base is not None:
            return dataclasses.replace(base, **kwargs)
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "", RunConfig())


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def write_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(dump_config(cfg))
