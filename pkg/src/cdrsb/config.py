"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

VARIANTS = ("full", "no_wt", "no_sl", "no_mi")
TASKS = ("rating", "ranking")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "rating"
    d: int = 64
    d_prime: int = 64
    batch_size: int = 128
    learning_rate: float = 1e-4
    lam: float = 1e-3
    patience: int = 5
    max_epochs: int = 200
    seed: int = 0
    similarity_threshold: float = 0.5
    variant: str = "full"
    dropout: float = 0.1
    batch_norm: bool = True
    activation: str = "silu"
    optimizer: str = "rmsprop"
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    weight_decay: float = 0.0
    # ranking: sampled negatives per training positive, resampled every epoch
    train_negatives: int = 4
    eval_negatives: int = 99
    eval_k: int = 10
    # recompute the alpha cache every batch instead of once per epoch
    alpha_per_batch: bool = False
    # start the rating head's output bias at the train-set mean rating
    init_bias_to_mean: bool = True
    leave_target_out: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1 or self.d < 1 or self.d_prime < 1:
            raise ConfigError("sizes and epoch counts must be positive")
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ConfigError("similarity_threshold must lie in [-1, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**values)

    def updated(self, **changes) -> "TrainConfig":
        return self.from_dict({**self.to_dict(), **changes})


# "lambda" is a Python keyword, accept it as an alias in files and overrides
_ALIASES = {"lambda": "lam"}


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(TrainConfig)}
    kind = types[name]
    raw = raw.strip()
    try:
        if kind in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {name!r}") from None
    return raw


def parse_assignments(lines) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into typed values."""
    values = {}
    known = {f.name for f in fields(TrainConfig)}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"line {lineno}: expected key = value, got {line.strip()!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides=(), **extra) -> TrainConfig:
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_assignments(fh))
    values.update(parse_assignments(overrides))
    values.update({k: v for k, v in extra.items() if v is not None})
    return TrainConfig.from_dict(values)


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.to_dict().items())
