"""Declarative run configuration: one JSON document drives every CLI command.

The document has six sections -- model, schedule, data, train, sampler, eval --
each mapping onto a frozen dataclass below. Loading is strict: unknown keys
and wrong types are rejected with the exact dotted path of the offender, so a
typo in a config file fails loudly instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .adapters import DEFAULT_RANK
from .data import GENERATORS, SyntheticDataset
from .diffusion import (
    DESK_BETA_END,
    DESK_BETA_START,
    DESK_TIMESTEPS,
    DiffusionSchedule,
    SamplerConfig,
    build_schedule,
)
from .errors import ConfigError
from .unet import UNetConfig

__all__ = [
    "ScheduleConfig", "TrainConfig", "DataConfig", "EvalConfig",
    "RunConfig", "parse_runconfig", "load_runconfig", "default_runconfig",
]


@dataclass(frozen=True)
class ScheduleConfig:
    timesteps: int = DESK_TIMESTEPS
    beta_start: float = DESK_BETA_START
    beta_end: float = DESK_BETA_END

    def build(self) -> DiffusionSchedule:
        return build_schedule(self.timesteps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class TrainConfig:
    resolutions: tuple[tuple[int, int], ...] = ((8, 8), (12, 12), (24, 24), (32, 32))
    standard_resolution: int = 16
    steps_base: int = 2000
    steps_adapter: int = 2000
    batch_size: int = 8
    lr: float = 1e-4  # adapter phase
    lr_base: float = 1e-3  # base pretraining starts from scratch and runs hotter
    adam_beta1: float = 0.95
    adam_beta2: float = 0.99
    weight_decay: float = 0.0
    seed: int = 0
    p_uncond: float = 0.1
    rank: int = DEFAULT_RANK
    alpha_r: float = 0.4

    def validate(self) -> None:
        if self.standard_resolution < 1:
            raise ConfigError("train.standard_resolution must be >= 1")
        if not self.resolutions:
            raise ConfigError("train.resolutions must be non-empty")
        for hw in self.resolutions:
            if len(hw) != 2 or any(int(v) < 1 for v in hw):
                raise ConfigError(f"train.resolutions entries must be [H, W] pairs, got {hw!r}")
        if self.steps_base < 0 or self.steps_adapter < 0:
            raise ConfigError("train step counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not (0.0 <= self.p_uncond <= 1.0):
            raise ConfigError(f"train.p_uncond must lie in [0, 1], got {self.p_uncond}")
        if self.weight_decay < 0.0:
            raise ConfigError("train.weight_decay must be >= 0")
        if self.lr_base < 0.0:
            raise ConfigError("train.lr_base must be >= 0")
        if self.rank < 1:
            raise ConfigError("train.rank must be >= 1")
        if not (0.0 <= self.alpha_r <= 1.0):
            raise ConfigError(f"train.alpha_r must lie in [0, 1], got {self.alpha_r}")


@dataclass(frozen=True)
class DataConfig:
    generator: str = "gradients"
    num_classes: int = 4
    channels: int = 1

    def build(self) -> SyntheticDataset:
        ds = SyntheticDataset(self.generator, self.num_classes, self.channels)
        ds.validate()
        return ds


@dataclass(frozen=True)
class EvalConfig:
    buckets: tuple[tuple[int, int], ...] = ((8, 8), (16, 16), (24, 24), (32, 32))
    n_batches: int = 4
    batch_size: int = 4
    seed: int = 0
    alphas: tuple[float, ...] = (0.0, 0.5, 1.0)

    def validate(self) -> None:
        if not self.buckets:
            raise ConfigError("eval.buckets must be non-empty")
        if self.n_batches < 1 or self.batch_size < 1:
            raise ConfigError("eval.n_batches and eval.batch_size must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: UNetConfig = field(default_factory=UNetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        if self.schedule.timesteps < 1:
            raise ConfigError("schedule.timesteps must be >= 1")
        self.data.build()
        self.train.validate()
        self.sampler.validate()
        self.eval.validate()
        if self.data.channels != self.model.in_channels:
            raise ConfigError(
                f"data.channels ({self.data.channels}) must equal "
                f"model.in_channels ({self.model.in_channels})"
            )
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTION_TYPES = {
    "model": UNetConfig,
    "schedule": ScheduleConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "eval": EvalConfig,
}

# leaf fields that hold sequences of [H, W] pairs and need list->tuple coercion
_PAIR_LIST_FIELDS = {"train.resolutions", "eval.buckets"}
_SCALAR_LIST_FIELDS = {"model.channel_mults", "eval.alphas"}


def _coerce_leaf(path: str, expected, value):
    if path in _PAIR_LIST_FIELDS:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list of [H, W] pairs")
        out = []
        for hw in value:
            if not isinstance(hw, (list, tuple)) or len(hw) != 2:
                raise ConfigError(f"{path} entries must be [H, W] pairs, got {hw!r}")
            out.append((_int_at(f"{path}[0]", hw[0]), _int_at(f"{path}[1]", hw[1])))
        return tuple(out)
    if path in _SCALAR_LIST_FIELDS:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list of numbers")
        kind = float if path.endswith("alphas") else int
        return tuple(
            _int_at(path, v) if kind is int else _float_at(path, v) for v in value
        )
    if expected is bool or expected == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if expected is int or expected == "int":
        return _int_at(path, value)
    if expected is float or expected == "float":
        return _float_at(path, value)
    if expected is str or expected == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config field type {expected!r}")


def _int_at(path: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    return value


def _float_at(path: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path} must be a number, got {value!r}")
    return float(value)


def _build_section(name: str, cls, payload: dict):
    if not isinstance(payload, dict):
        raise ConfigError(f"section '{name}' must be an object, got {payload!r}")
    valid = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(payload) - set(valid))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{name}.{k}' for k in unknown)}")
    kwargs = {}
    for key, value in payload.items():
        expected = valid[key]
        if isinstance(expected, str):  # from __future__ annotations
            expected = {"int": int, "float": float, "str": str, "bool": bool}.get(
                expected.split("|")[0].strip(), expected
            )
        kwargs[key] = _coerce_leaf(f"{name}.{key}", expected, value)
    return cls(**kwargs)


def parse_runconfig(document: dict) -> RunConfig:
    if not isinstance(document, dict):
        raise ConfigError("run configuration must be a JSON object")
    unknown = sorted(set(document) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {
        name: _build_section(name, cls, document[name])
        for name, cls in _SECTION_TYPES.items()
        if name in document
    }
    return RunConfig(**kwargs).validate()


def load_runconfig(path: str | None) -> RunConfig:
    """Parse and validate a JSON run configuration; None gives the defaults."""
    if path is None:
        return default_runconfig()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            document = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed run configuration JSON: {exc}") from None
    return parse_runconfig(document)


def default_runconfig() -> RunConfig:
    return RunConfig().validate()
