"""Run configuration: a flat ``key = value`` file with command-line overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields

from .errors import ConfigError
from .optim import MesoConfig, Schedule, StatePolicy
from .projection import ProjectionKind

TASKS = ("regression", "toy-lm")
TRAIN_METHODS = ("full", "meso", "lora", "relora")


@dataclass
class RunConfig:
    task: str = "toy-lm"
    method: str = "meso"
    kind: str = "top_r"
    dim: int = 64
    depth: int = 2
    vocab: int = 32
    order: int = 2
    concentration: float = 0.05
    linear_embed: bool = True
    noise: float = 0.1
    r: int = 16
    k_freq: int = 50
    alpha: float = 1.0
    state_policy: str = "reset"
    side_auto: bool = True
    fused: bool = True
    project_io: bool = False
    lr: float = 0.03
    warmup: int = 100
    refresh_warmup: int = 20
    lr_floor: float = 0.1
    steps: int = 2000
    batch: int = 64
    eval_size: int = 2048
    log_every: int = 50
    seed: int = 0
    init_scale: float = 1.0
    workers: int = 1
    sketch_cols: int = 0
    threaded: bool = False
    wall_time: bool = False

    def validate(self) -> "RunConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.method not in TRAIN_METHODS:
            raise ConfigError(f"method must be one of {TRAIN_METHODS}, got {self.method!r}")
        try:
            ProjectionKind(self.kind)
            StatePolicy(self.state_policy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for name in ("dim", "vocab", "order", "r", "k_freq", "steps", "batch", "eval_size", "log_every", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.depth < 0 or self.warmup < 0 or self.refresh_warmup < 0 or self.sketch_cols < 0:
            raise ConfigError("depth, warmup, refresh_warmup and sketch_cols must be nonnegative")
        if not (self.lr > 0 and self.alpha > 0):
            raise ConfigError("lr and alpha must be positive")
        if self.batch % self.workers:
            raise ConfigError("batch must divide evenly across workers")
        return self

    def meso(self) -> MesoConfig:
        return MesoConfig(
            r=self.r,
            k_freq=self.k_freq,
            alpha=self.alpha,
            kind=ProjectionKind(self.kind),
            state_policy=StatePolicy(self.state_policy),
            side_auto=self.side_auto,
            fused=self.fused,
            full_layers=() if self.project_io else (0, self.depth),
        )

    def schedule(self) -> Schedule:
        projected = self.method == "meso"
        return Schedule(
            base_lr=self.lr,
            total=self.steps,
            warmup=self.warmup,
            refresh_warmup=self.refresh_warmup if projected else 0,
            k_freq=self.k_freq if projected else 0,
            floor=self.lr_floor,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    typ = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} ({typ})") from None


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        setattr(cfg, key, _coerce(key, value))
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    cfg = dataclasses.replace(cfg)
    for key, value in overrides.items():
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value) if isinstance(value, str) else value)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
