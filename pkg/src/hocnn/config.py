"""Experiment configuration: a TOML tree mapped onto typed sections.

Parsing is fail-closed: unknown sections or keys and ill-typed values raise
:class:`ConfigurationError`.  ``reference.toml`` next to this module pins
every default.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

from .errors import ConfigurationError
from .network import TrainConfig
from .retina import CellBankConfig
from .stimulus import StimulusConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

REFERENCE_PATH = Path(__file__).with_name("reference.toml")
STA_MARGIN = 6  # planted STA cells keep this distance from the frame edge


@dataclass
class ModelConfig:
    kind: str = "hocnn"
    channels: tuple = (4, 4)
    windows: tuple = ((3, 3), (3, 3))
    order: int = 2

    def __post_init__(self):
        if self.kind not in ("baseline", "hocnn", "hocnn_v2"):
            raise ConfigurationError(f"model.kind must be baseline or hocnn, got {self.kind!r}")
        if len(self.channels) != 2 or len(self.windows) != 2:
            raise ConfigurationError("model needs two channel counts and two windows")
        if self.order not in (2, 3):
            raise ConfigurationError("model.order must be 2 or 3")


@dataclass
class TrainSection:
    lr: float = 5e-4
    weight_decay: float = 1e-6
    batch_size: int = 2
    max_epochs: int = 30
    val_fraction: float = 0.10
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    scheduler_threshold: float = 1e-5
    min_lr: float = 1e-7
    early_stop_patience: int = 5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    fraction: float = 0.9
    freeze: tuple = ()

    def to_train_config(self, seed: int) -> TrainConfig:
        kwargs = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "fraction"}
        return TrainConfig(seed=seed, **kwargs)


@dataclass
class ReadoutSection:
    tap: int = -1
    lam: float = -1.0
    lambdas: tuple = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3, 1e4)
    per_frame: bool = False


@dataclass
class StaSection:
    n_frames: int = 20000
    height: int = 20
    width: int = 20
    n_lags: int = 40
    frame_rate: float = 40.0
    n_cells: int = 4
    gain: float = 1.5
    offset: float = -2.0
    base_rate: float = 4.0


@dataclass
class PathsSection:
    dataset: str = "stimulus.hocv"
    labels: str = "labels.csv"
    responses_train: str = "responses_train.horx"
    responses_test: str = "responses_test.horx"
    cells: str = "cells.json"
    reliability: str = "reliability.csv"
    checkpoint: str = "model.hock"
    train_log: str = "train_log.csv"
    noise: str = "noise.hocv"


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_bootstrap: int = 10000
    stimulus: StimulusConfig = field(default_factory=StimulusConfig)
    cells: CellBankConfig = field(default_factory=CellBankConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    readout: ReadoutSection = field(default_factory=ReadoutSection)
    sta: StaSection = field(default_factory=StaSection)
    paths: PathsSection = field(default_factory=PathsSection)


_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigurationError(f"{where} must be an array")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    raise ConfigurationError(f"{where}: unsupported value")


def _build(cls, data: dict, name: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in data.items()}
    try:
        return cls(**{**{k: getattr(defaults, k) for k in known}, **kwargs})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"[{name}]: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    defaults = ExperimentConfig()
    for name, value in data.items():
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, name)
        else:
            kwargs[name] = _coerce(value, default, name)
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    s = cfg.stimulus
    if min(s.height, s.width, s.check_size, s.n_frames) < 1:
        raise ConfigurationError("stimulus dimensions must be positive")
    if s.n_train < 0 or s.n_test < 0:
        raise ConfigurationError("sequence counts must be nonnegative")
    if cfg.n_bootstrap < 1:
        raise ConfigurationError("n_bootstrap must be positive")
    if not 0.0 < cfg.train.fraction <= 1.0:
        raise ConfigurationError("train.fraction must lie in (0, 1]")
    sc = cfg.sta
    if min(sc.height, sc.width) < 2 * STA_MARGIN + 1:
        raise ConfigurationError(f"sta frames must be at least {2 * STA_MARGIN + 1} pixels on a side")
    if sc.n_lags < 1 or sc.n_cells < 0 or sc.n_frames < sc.n_lags:
        raise ConfigurationError("sta needs n_lags >= 1, n_cells >= 0 and n_frames >= n_lags")
    cfg.train.to_train_config(cfg.seed)


def load_config(path=None) -> ExperimentConfig:
    """Read a TOML file; ``None`` gives the reference configuration."""
    path = REFERENCE_PATH if path is None else Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        value = getattr(cfg, name)
        if dataclasses.is_dataclass(value):
            out[name] = {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
        else:
            out[name] = value
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))
