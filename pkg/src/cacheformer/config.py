"""Hyperparameters, derived dimensions and the flat ``key=value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

AGGREGATION_MODES = ("joint_softmax", "literal_branch")
PHASES = ("pretrain_no_cache", "finetune_with_cache")


class ConfigError(ValueError):
    """Raised for malformed config files or invariant violations."""


@dataclass(frozen=True)
class ModelConfig:
    n: int = 1024
    d: int = 768
    h: int = 12
    w: int = 128
    s: int = 16
    r: int = 256
    k: int = 7
    u: int = 1
    p_avg: int = 256
    layers: int = 12
    vocab: int = 256
    aggregation_mode: str = "joint_softmax"
    cache_enabled: bool = True
    overlap_enabled: bool = True
    ffn: bool = True
    tie_embeddings: bool = False

    @property
    def d_k(self) -> int:
        return self.d // self.h

    @property
    def n_s(self) -> int:
        return self.n // self.s

    @property
    def c(self) -> int:
        return self.r // self.n_s

    @property
    def m(self) -> int:
        return self.n // self.p_avg

    @property
    def cache_width(self) -> int:
        return self.k * self.u * self.s

    @property
    def f(self) -> int:
        return 2 * self.w + self.r + self.cache_width

    def derived(self) -> dict[str, int]:
        return {"d_k": self.d_k, "n_s": self.n_s, "c": self.c, "m": self.m, "f": self.f}

    def replace(self, **changes: Any) -> "ModelConfig":
        return validate(dataclasses.replace(self, **changes))


def validate(config: ModelConfig) -> ModelConfig:
    """Check every invariant and return the config unchanged.

    Derived sizes (``d_k``, ``n_s``, ``c``, ``m``, ``f``) are properties, so a
    config that passes is already complete and ``validate`` is idempotent.
    """
    for name in ("n", "d", "h", "w", "s", "r", "k", "u", "p_avg", "layers", "vocab"):
        value = getattr(config, name)
        if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    if config.aggregation_mode not in AGGREGATION_MODES:
        raise ConfigError(
            f"aggregation_mode must be one of {AGGREGATION_MODES}, got {config.aggregation_mode!r}"
        )

    def divides(a: str, b: str, av: int, bv: int) -> None:
        if av % bv:
            raise ConfigError(f"{a}={av} is not divisible by {b}={bv}")

    divides("d", "h", config.d, config.h)
    divides("n", "s", config.n, config.s)
    divides("n", "p_avg", config.n, config.p_avg)
    divides("n", "w", config.n, config.w)
    divides("r", "n_s", config.r, config.n_s)
    divides("p_avg", "s", config.p_avg, config.s)
    if config.r < config.n_s:
        raise ConfigError(f"r={config.r} is smaller than n_s={config.n_s}; each segment needs c >= 1")
    if config.u % 2 == 0:
        raise ConfigError(f"u must be odd, got {config.u}")
    if config.overlap_enabled and config.s % 2:
        raise ConfigError(f"overlapping segments need an even s, got s={config.s}")
    if config.cache_enabled and config.k * config.u > config.n_s - 1:
        raise ConfigError(
            f"k*u={config.k * config.u} exceeds the {config.n_s - 1} past segments available (n/s - 1)"
        )
    return config


# ---------------------------------------------------------------- file format


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(kind: Any, raw: str) -> Any:
    """Convert a config-file string to the annotated field type."""
    text = raw.strip()
    if kind in (bool, "bool"):
        return _parse_bool(text)
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    if kind in ("int | None", "Optional[int]"):
        return None if text.lower() in ("", "none") else int(text)
    return text


def field_types(cls: type) -> dict[str, Any]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def parse_pairs(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def build(cls: type, pairs: Mapping[str, str], base: Any = None) -> Any:
    """Instantiate dataclass ``cls`` from string pairs; unknown keys are errors."""
    types = field_types(cls)
    unknown = sorted(set(pairs) - set(types))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    values: dict[str, Any] = {}
    for key, raw in pairs.items():
        try:
            values[key] = coerce(types[key], raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    if base is None:
        return cls(**values)
    return dataclasses.replace(base, **values)


def format_pairs(obj: Any) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name}={'' if value is None else value}")
    return "\n".join(lines) + "\n"


def model_config_from_pairs(pairs: Mapping[str, str]) -> ModelConfig:
    return validate(build(ModelConfig, pairs))


def load_model_config(path: str | Path) -> ModelConfig:
    return model_config_from_pairs(parse_pairs(Path(path).read_text()))


def split_pairs(pairs: Mapping[str, str], *classes: type) -> list[dict[str, str]]:
    """Route keys to the dataclass that owns them; leftovers raise ConfigError."""
    routed: list[dict[str, str]] = [{} for _ in classes]
    owners = [set(field_types(cls)) for cls in classes]
    unknown = []
    for key, value in pairs.items():
        for bucket, names in zip(routed, owners):
            if key in names:
                bucket[key] = value
                break
        else:
            unknown.append(key)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
    return routed


__all__ = [
    "AGGREGATION_MODES",
    "PHASES",
    "ConfigError",
    "ModelConfig",
    "validate",
    "parse_pairs",
    "build",
    "format_pairs",
    "split_pairs",
    "load_model_config",
    "model_config_from_pairs",
]
