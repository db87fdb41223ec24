"""Flat ``key = value`` configuration files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Dict, Mapping, Type, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in value.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    return value


def from_mapping(cls: Type[T], values: Mapping, base: T = None) -> T:
    """Build ``cls`` from string or typed values; unknown keys are errors."""
    base = base if base is not None else cls()
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v, getattr(base, k)) for k, v in values.items()}
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def from_text(cls: Type[T], text: str) -> T:
    return from_mapping(cls, parse_kv(text))


def from_file(cls: Type[T], path) -> T:
    return from_text(cls, Path(path).read_text())


def to_text(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x.item() if hasattr(x, "item") else x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
