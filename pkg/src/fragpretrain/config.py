"""``key=value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


def read_kv_file(path: str | Path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(text: str, hint, default):
    origin = typing.get_origin(hint)
    if hint is bool or isinstance(default, bool):
        low = text.lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("1", "true", "yes")
    if hint is int or isinstance(default, int):
        return int(text)
    if hint is float or isinstance(default, float):
        return float(text)
    if origin is tuple or isinstance(default, tuple):
        return tuple(x.strip() for x in text.replace(",", " ").split() if x.strip())
    if text.lower() in ("none", "all", "") and default is None:
        return None
    if default is None:
        try:
            return int(text)
        except ValueError:
            return text
    return text


def apply_overrides(obj, values: dict[str, str]):
    """Return a copy of dataclass ``obj`` with string ``values`` coerced onto its fields."""
    fields = {f.name: f for f in dataclasses.fields(obj)}
    hints = typing.get_type_hints(type(obj))
    changes = {}
    for key, text in values.items():
        if key not in fields:
            raise KeyError(f"unknown config key {key!r}")
        changes[key] = _coerce(str(text), hints.get(key), getattr(obj, key))
    return dataclasses.replace(obj, **changes)


def as_strings(obj) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
    return out
