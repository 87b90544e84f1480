"""Run configuration and its ``key=value`` text format."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .errors import ConfigError
from .partition import VALID_K


@dataclass(frozen=True)
class RunConfig:
    K: int = 4
    G: int = 8
    embed_dim: int = 24
    epsilon: float = 0.1
    soft_tau_point: float = 0.1
    soft_tau_region: float = 0.25
    normalize_shifts: bool = False
    reduction_relu: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.K not in VALID_K:
            raise ConfigError(f"K must be one of {VALID_K}, got {self.K}")
        if self.G < 1:
            raise ConfigError(f"G must be >= 1, got {self.G}")
        if self.embed_dim < 4 or self.embed_dim % 4:
            raise ConfigError(f"embed_dim must be a positive multiple of 4, got {self.embed_dim}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not (self.soft_tau_point > 0 and self.soft_tau_region > 0):
            raise ConfigError("soft-mode temperatures must be > 0")

    @property
    def k(self):
        return math.isqrt(self.K)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, text):
    kind = _FIELDS[name].type
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "int":
        return int(text)
    return float(text)


def parse_run_config(text, source="<config>"):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_run_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read(), source=str(path))


def format_run_config(cfg):
    lines = []
    for name in _FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"
