"""Run configuration and the flat ``key=value`` config file format.

Lines are ``key = value``; ``#`` starts a comment; tuples are comma
separated (``hidden = 64,64``); ``none`` means unset. Keys are the
:class:`ScheduleConfig` field names.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .agent import AgentConfig
from .errors import ConfigError

SCHEDULES = ("sope", "sacfd", "rlpd_lite", "speq_fixed")
DEFAULT_PROFILE = {"sope": "sope", "sacfd": "sope", "speq_fixed": "sope", "rlpd_lite": "rlpd_lite"}


@dataclass
class ScheduleConfig:
    schedule: str = "sope"
    env: str = "pendulum"
    tier: str = "expert"
    seed: int = 0
    total_steps: int = 50_000
    online_steps: int = 5_000
    n_fix: int = 5_000
    utd: int = 20
    profile: str | None = None
    ensemble: int | None = None
    target_subset: int | None = None
    dropout: float | None = None
    layer_norm: bool | None = None
    hidden: tuple = (256, 256)
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    init_alpha: float = 1.0
    entropy_in_target: bool = True
    dtype: str = "float64"
    patience: int = 5
    eval_interval: int = 500
    cap: int = 50_000
    val_fraction: float = 0.1
    val_source: str = "union"
    aggregation: str = "min"
    dm_samples: int = 1
    max_val_states: int | None = None
    eval_every: int = 2_500
    eval_episodes: int = 10
    offline_size: int | None = None
    data_dir: str | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}; choose from {SCHEDULES}")
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if self.schedule in ("sope", "speq_fixed") and self.online_steps <= 0:
            raise ConfigError("online_steps must be positive")
        if self.schedule == "speq_fixed" and self.n_fix < 0:
            raise ConfigError("n_fix must be non-negative")
        if self.schedule == "rlpd_lite" and self.utd < 1:
            raise ConfigError("utd must be >= 1")
        if self.schedule == "sope":
            if self.patience < 1 or self.eval_interval < 1:
                raise ConfigError("patience and eval_interval must be positive")
            if self.cap < self.eval_interval:
                raise ConfigError("cap must be at least one eval interval")
            if not 0.0 < self.val_fraction < 1.0:
                raise ConfigError("val_fraction must lie in (0, 1)")
        if self.eval_every <= 0 or self.eval_episodes <= 0:
            raise ConfigError("evaluation cadence and episode count must be positive")
        if self.batch_size <= 0 or self.batch_size % 2:
            raise ConfigError("batch_size must be a positive even integer")

    @property
    def updates_per_step(self):
        return self.utd if self.schedule == "rlpd_lite" else 1

    def agent_config(self, obs_dim, act_dim):
        overrides = dict(hidden=self.hidden, gamma=self.gamma, tau=self.tau, actor_lr=self.lr,
                         critic_lr=self.lr, alpha_lr=self.lr, init_alpha=self.init_alpha,
                         entropy_in_target=self.entropy_in_target, dtype=self.dtype)
        for key in ("ensemble", "target_subset", "dropout", "layer_norm"):
            value = getattr(self, key)
            if value is not None:
                overrides[key] = value
        return AgentConfig.profile(self.profile or DEFAULT_PROFILE[self.schedule], obs_dim, act_dim, **overrides)

    def resolved_data_dir(self):
        return Path(self.data_dir or os.environ.get("SOPE_DATA_DIR", "data"))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _field_types():
    hints = typing.get_type_hints(ScheduleConfig)
    return {f.name: hints[f.name] for f in fields(ScheduleConfig)}


def parse_value(key, text):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    text = text.strip()
    kind = types[key]
    args = typing.get_args(kind)
    optional = type(None) in args
    if optional and text.lower() in ("none", ""):
        return None
    base = next((a for a in args if a is not type(None)), kind) if args else kind
    try:
        if base is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if base is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
        if base is int:
            return int(float(text)) if "e" in text.lower() else int(text.replace("_", ""))
        if base is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_overrides(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip().replace("-", "_")
        out[key] = parse_value(key, value)
    return out


def read_config_text(text):
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        pairs.append(line)
    return parse_overrides(pairs)


def load_config(path=None, **overrides):
    values = read_config_text(Path(path).read_text()) if path else {}
    values.update(overrides)
    return ScheduleConfig(**values)
