"""Run configuration: nested dataclasses loaded from YAML/JSON with strict validation."""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .corpus import SynthSpec
from .nets import METHODS, ModelConfig

OUTPUT_DIR_ENV = "DOMAINMT_OUTPUT_DIR"
DEFAULT_LAM = 0.1


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    p_hard: float = 0.25
    t_min: float = 1e-3
    gumbel: bool = False
    regularize_hard_steps: bool = False
    # annealing horizon; 0 means "the whole run"
    total_steps: int = 0


@dataclass
class OptimConfig:
    lr_peak: float = 3e-4
    warmup: int = 4000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8


@dataclass
class DataConfig:
    synth: SynthSpec | None = field(default_factory=SynthSpec)
    train_path: str | None = None
    valid_path: str | None = None


@dataclass
class DecodingConfig:
    mode: str = "greedy"
    beam_size: int = 1
    max_len: int = 32


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    method: str = "target_encoder"
    target_encoder_input: str = "target"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    lam: float = DEFAULT_LAM
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    steps: int = 8000
    batch_size: int = 32
    valid_every: int = 1000
    log_every: int = 1
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.target_encoder_input not in ("target", "source"):
            raise ConfigError("target_encoder_input must be 'target' or 'source'")
        if self.method != "target_encoder" and self.target_encoder_input != "target":
            raise ConfigError("target_encoder_input only applies to method=target_encoder")
        if self.method != "target_encoder" and (self.schedule != ScheduleConfig() or self.lam != DEFAULT_LAM):
            raise ConfigError(f"schedule and lam only apply to method=target_encoder (method is {self.method!r})")
        if not (self.lam >= 0 and self.lam != float("inf")):
            raise ConfigError(f"lam must be finite and >= 0, got {self.lam}")
        if not 0 <= self.schedule.p_hard <= 1:
            raise ConfigError("schedule.p_hard must be in [0, 1]")
        if self.schedule.total_steps < 0:
            raise ConfigError("schedule.total_steps must be >= 0")
        if self.steps < 1 or self.batch_size < 1 or self.log_every < 1 or self.valid_every < 1:
            raise ConfigError("steps, batch_size, log_every and valid_every must be >= 1")
        if self.optimizer.lr_peak <= 0 or self.optimizer.warmup < 1:
            raise ConfigError("optimizer.lr_peak must be > 0 and warmup >= 1")
        if self.decoding.mode not in ("greedy", "beam", "sample"):
            raise ConfigError(f"decoding.mode must be greedy, beam or sample, got {self.decoding.mode!r}")
        if self.decoding.beam_size < 1:
            raise ConfigError("decoding.beam_size must be >= 1")
        if self.data.synth is None and not self.data.train_path:
            raise ConfigError("data needs either synth or train_path")

    @property
    def anneal_steps(self) -> int:
        return self.schedule.total_steps or self.steps

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data, where: str):
    if dataclasses.is_dataclass(cls):
        if not isinstance(data, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
        hints = typing.get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}") for k, v in data.items()}
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    origin = typing.get_origin(cls)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(cls)
        if data is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{where}: may not be null")
        for a in args:
            if a is type(None):
                continue
            try:
                return _build(a, data, where)
            except ConfigError:
                continue
        raise ConfigError(f"{where}: {data!r} does not match {cls}")
    if cls is float:
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {data!r}")
        return float(data)
    if cls is int:
        if isinstance(data, bool) or not isinstance(data, int):
            raise ConfigError(f"{where}: expected an integer, got {data!r}")
        return data
    if cls is bool:
        if not isinstance(data, bool):
            raise ConfigError(f"{where}: expected true/false, got {data!r}")
        return data
    if cls is str:
        if not isinstance(data, str):
            raise ConfigError(f"{where}: expected a string, got {data!r}")
        return data
    raise ConfigError(f"{where}: unsupported field type {cls}")


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from None
    return config_from_dict(data or {})


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)
