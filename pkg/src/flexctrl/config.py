"""``key = value`` configuration files and the training configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    stage: str = "base"
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    lambda_ca: float = 0.01
    lambda_mask: float = 0.01
    objective: str = "total"  # "total" or "ldm" (control stage only)
    cond_drop: float = 0.0
    seed: int = 0
    # adapter factor shape
    slow_p: int = 2
    slow_q: int = 2
    rank: int = 2
    n_terms: int = 2
    share_slow: bool = False
    # noise schedule
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # architecture
    base_channels: int = 16
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage not in ("base", "control"):
            raise ConfigError(f"stage must be 'base' or 'control', got {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lambda_ca < 0 or self.lambda_mask < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.objective not in ("total", "ldm"):
            raise ConfigError(f"objective must be 'total' or 'ldm', got {self.objective!r}")
        if not 0 <= self.cond_drop < 1:
            raise ConfigError("cond_drop must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(value: str, kind):
    if kind is bool or kind == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind is int or kind == "int":
        return int(value)
    if kind is float or kind == "float":
        return float(value)
    return value


def parse_pairs(text: str) -> list[tuple[str, str]]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys may repeat."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        pairs.append((key, value))
    return pairs


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = dataclasses.asdict(base or TrainConfig())
    for key, value in parse_pairs(text):
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = _coerce(value, fields[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for key, value in dataclasses.asdict(cfg).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
