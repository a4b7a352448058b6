"""Flat ``key = value`` configuration files.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Values are converted using the target dataclass field's default type:
lists are comma separated, booleans accept true/false/1/0/yes/no.
"""
from __future__ import annotations

from dataclasses import MISSING, fields


class ConfigFileError(ValueError):
    pass


def read_pairs(path):
    """Return an ordered dict of raw string values."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigFileError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ConfigFileError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigFileError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def _convert(key, value, default):
    if isinstance(default, bool):
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigFileError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, (list, tuple)):
            items = [s.strip() for s in value.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            conv = [kind(s) for s in items]
            return type(default)(conv)
    except ValueError as exc:
        raise ConfigFileError(f"{key}: cannot parse {value!r} ({exc})") from None
    return value


def _defaults(cls):
    out = {}
    for f in fields(cls):
        if f.default is not MISSING:
            out[f.name] = f.default
        elif f.default_factory is not MISSING:
            out[f.name] = f.default_factory()
    return out


def typed_values(pairs, cls, extra=()):
    """Convert raw pairs for dataclass ``cls``; keys in ``extra`` pass through as strings.

    Unknown keys raise :class:`ConfigFileError`.
    """
    defaults = _defaults(cls)
    kw, rest = {}, {}
    for key, value in pairs.items():
        if key in defaults:
            kw[key] = _convert(key, value, defaults[key])
        elif key in extra:
            rest[key] = value
        else:
            raise ConfigFileError(f"unknown key {key!r} for {cls.__name__}")
    return kw, rest


def load(path, cls, extra=()):
    """Build ``cls`` from a config file; returns (instance, extra raw values)."""
    kw, rest = typed_values(read_pairs(path), cls, extra)
    try:
        return cls(**kw), rest
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"{path}: {exc}") from None


def dump(obj, path, keys=None):
    """Write a dataclass instance back out in the same format."""
    with open(path, "w") as fh:
        for f in fields(obj):
            if keys is not None and f.name not in keys:
                continue
            v = getattr(obj, f.name)
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            fh.write(f"{f.name} = {v}\n")
