"""Run configuration loaded from JSON with exhaustive key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import DIRECTIONS, SHAPE_KINDS
from .diffusion import NoiseSchedule, make_schedule
from .errors import ConfigError
from .model import ModelConfig


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    # None means the 1000-step [1e-4, 0.02] range rescaled to T
    beta_start: float | None = None
    beta_end: float | None = None


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    smoothing_window: int = 25


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    clips: int = 64
    kinds: tuple[str, ...] = SHAPE_KINDS


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.model.validate()
        o = self.optim
        if o.lr <= 0 or o.steps < 0 or o.batch_size < 1 or o.checkpoint_every < 0 or o.smoothing_window < 1:
            raise ConfigError(f"invalid optimizer settings {o}")
        if not (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1 and o.eps > 0):
            raise ConfigError(f"invalid Adam moments {o}")
        if self.data.clips < 1:
            raise ConfigError("data.clips must be at least 1")
        if not self.data.kinds or any(k not in SHAPE_KINDS for k in self.data.kinds):
            raise ConfigError(f"data.kinds must be a non-empty subset of {SHAPE_KINDS}")
        needed = len(self.data.kinds) * len(DIRECTIONS)
        if self.model.vocab < needed:
            raise ConfigError(f"model.vocab={self.model.vocab} cannot encode {needed} prompt ids")
        try:
            self.noise_schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def noise_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return make_schedule(s.kind, self.model.T, s.beta_start, s.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["kinds"] = list(self.data.kinds)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


_SECTIONS = {"model": ModelConfig, "schedule": ScheduleConfig, "optim": OptimConfig, "data": DataConfig}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = dict(raw)
    if cls is DataConfig and "kinds" in kwargs:
        kwargs["kinds"] = tuple(kwargs["kinds"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    if not isinstance(kwargs.get("seed", 0), int):
        raise ConfigError("seed must be an integer")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(raw)
