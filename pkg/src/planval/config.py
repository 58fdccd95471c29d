"""Trainer configuration: dataclasses, ``key = value`` files, rollout schedule, presets."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .errors import ConfigError

VARIANTS = ("mppve", "sac-mppve", "sac-mve", "sac-mve-mpi", "sac")


def rollout_schedule(t, x, y, a, b):
    """min(max(x + (t - a) / (b - a) * (y - x), x), y), truncated to an int."""
    if not a < b:
        raise ValueError("schedule needs a < b")
    v = min(max(x + (t - a) / (b - a) * (y - x), x), y)
    return int(math.floor(v))


@dataclass
class ScheduleConfig:
    x: int = 1
    y: int = 5
    a: int = 0
    b: int = 1000


@dataclass
class ModelConfig:
    members: int = 5
    elites: int = 3
    hidden: tuple = (64, 64)
    activation: str = "relu"
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 30
    holdout: float = 0.2
    patience: int = 5
    mode: str = "sample"          # model noise while planning: sample | mean


@dataclass
class BufferConfig:
    env_capacity: int = 100_000
    model_capacity: int = 1_000_000


@dataclass
class MetricsConfig:
    eval_interval: int = 1000
    eval_episodes: int = 10
    wall_clock: bool = False      # timing goes to a sidecar file unless on


@dataclass
class TrainerConfig:
    env: str = "pendulum"
    variant: str = "mppve"
    k: int = 3
    soft: bool = True
    alpha: float = 0.2
    learn_alpha: bool = True
    target_entropy: float = -1.0
    gamma: float = 0.99
    epochs: int = 10              # N
    steps_per_epoch: int = 1000   # E
    rollouts: int = 400           # M
    critic_updates: int = 20      # G
    start_size: int = 1000        # U
    batch_size: int = 256         # B
    lr_critic: float = 3e-4
    lr_actor: float = 3e-4
    lr_alpha: float = 3e-4
    polyak: float = 0.005
    real_ratio: float = 0.1
    twin: bool = False
    hidden: tuple = (64, 64)
    mve_horizon: int = -1         # -1: k - 1
    stop_return: float = math.nan  # stop once an evaluation reaches this return
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        counts = {"k": self.k, "steps_per_epoch": self.steps_per_epoch, "rollouts": self.rollouts,
                  "critic_updates": self.critic_updates, "start_size": self.start_size,
                  "batch_size": self.batch_size, "model.members": self.model.members,
                  "model.elites": self.model.elites, "metrics.eval_interval": self.metrics.eval_interval,
                  "metrics.eval_episodes": self.metrics.eval_episodes}
        for name, v in counts.items():
            if v < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        s = self.schedule
        if not s.a < s.b or not s.x <= s.y or s.x < 1:
            raise ConfigError("schedule needs a < b, 1 <= x <= y")
        if self.model.elites > self.model.members:
            raise ConfigError("model.elites exceeds model.members")
        if not 0.0 <= self.real_ratio <= 1.0:
            raise ConfigError("real_ratio must lie in [0, 1]")
        if not 0.0 < self.polyak <= 1.0:
            raise ConfigError("polyak must lie in (0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.model.mode not in ("sample", "mean"):
            raise ConfigError("model.mode must be sample or mean")
        return self

    @property
    def horizon(self):
        return self.k - 1 if self.mve_horizon < 0 else self.mve_horizon

    def rollout_length(self, t):
        s = self.schedule
        return rollout_schedule(t, s.x, s.y, s.a, s.b)


# -- key = value files ------------------------------------------------------------------


def _coerce(text, current, key):
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def set_key(cfg, key, text):
    """Assign ``text`` to the dotted ``key`` (for example ``schedule.x``)."""
    parts = key.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not hasattr(obj, p) or not dataclasses.is_dataclass(getattr(obj, p)):
            raise ConfigError(f"unknown key {key!r}")
        obj = getattr(obj, p)
    leaf = parts[-1]
    names = {f.name for f in dataclasses.fields(obj)}
    if leaf not in names or dataclasses.is_dataclass(getattr(obj, leaf)):
        raise ConfigError(f"unknown key {key!r}")
    setattr(obj, leaf, _coerce(text, getattr(obj, leaf), key))


def parse_config(text, base=None):
    cfg = base or TrainerConfig()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        set_key(cfg, key, value)
    return cfg.validate()


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(str(e)) from None
    return parse_config(text)


def _flat(obj, prefix=""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            yield from _flat(v, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", v


def format_config(cfg):
    """Canonical text form; parse_config(format_config(c)) reproduces c."""
    lines = []
    for key, v in _flat(cfg):
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# -- presets from the published hyper-parameter table ------------------------------------

TABLE1 = {
    "inverted-pendulum": dict(steps=10_000, k=3, schedule=(1, 5, 0, 1_000), target_entropy=-0.05),
    "hopper": dict(steps=100_000, k=3, schedule=(1, 4, 20_000, 50_000), target_entropy=-1.0),
    "swimmer": dict(steps=200_000, k=3, schedule=(1, 1, 0, 1), target_entropy=-1.0),
    "half-cheetah": dict(steps=200_000, k=2, schedule=(1, 4, 20_000, 80_000), target_entropy=-3.0),
    "walker2d": dict(steps=200_000, k=2, schedule=(1, 1, 0, 1), target_entropy=-3.0),
    "ant": dict(steps=300_000, k=2, schedule=(1, 20, 20_000, 150_000), target_entropy=-4.0),
}
CRITIC_UPDATES = 20
ACTOR_UPDATES = 1


def preset(name):
    """TrainerConfig fields (k, schedule, target entropy) for a table entry."""
    p = TABLE1[name]
    cfg = TrainerConfig(k=p["k"], target_entropy=p["target_entropy"], critic_updates=CRITIC_UPDATES)
    cfg.schedule = ScheduleConfig(*p["schedule"])
    return cfg
