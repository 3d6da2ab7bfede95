"""Flat ``key=value`` config files mapped onto (nested) dataclasses.

Dotted keys address nested dataclass fields, e.g. ``noise.read_sigma=0.01``.
Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import os
import tempfile
import types
import typing
from pathlib import Path

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_kv(path.read_text())


def _coerce(value: str, hint, key):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if value.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if hint is bool:
            v = value.lower()
            if v in _TRUE:
                return True
            if v in _FALSE:
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return value
        if origin is tuple:
            parts = [p for p in value.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(_coerce(p.strip(), args[0], key) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    raise ConfigError(f"unsupported config type for {key}: {hint}")


def apply_overrides(obj, values: dict[str, str]):
    """Return a copy of dataclass ``obj`` with dotted-key overrides applied."""
    obj = dataclasses.replace(obj)
    for key, value in values.items():
        target, parts = obj, key.split(".")
        for p in parts[:-1]:
            sub = getattr(target, p, None) if p in _field_names(target) else None
            if sub is None or not dataclasses.is_dataclass(sub):
                raise ConfigError(f"unknown config key: {key}")
            sub = dataclasses.replace(sub)
            setattr(target, p, sub)
            target = sub
        leaf = parts[-1]
        if leaf not in _field_names(target):
            raise ConfigError(f"unknown config key: {key}")
        hints = typing.get_type_hints(type(target))
        if dataclasses.is_dataclass(getattr(target, leaf)):
            raise ConfigError(f"config key {key} names a section, not a value")
        setattr(target, leaf, _coerce(value, hints[leaf], key))
    return obj


def flatten(obj, prefix="") -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        elif isinstance(v, bool):
            out[key] = "true" if v else "false"
        elif isinstance(v, tuple):
            out[key] = ",".join(repr(x) for x in v)
        elif v is None:
            out[key] = "none"
        else:
            out[key] = repr(v) if isinstance(v, float) else str(v)
    return out


def dump_kv(values: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def write_text_atomic(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def _field_names(obj):
    return {f.name for f in dataclasses.fields(obj)}
