"""Flat ``key=value`` config files bound to dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
import zlib
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


def substream(seed: int, name: str, *extra: int):
    """Named random stream derived from the single run seed (e.g. ``"batching"``)."""
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8")), *extra])


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_kv_file(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv_text(path.read_text(encoding="utf-8"), str(path))


def _coerce(value, tp, key):
    if not isinstance(value, str):
        return value
    try:
        if tp is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {value!r} as {tp.__name__}") from None
    return value


def from_mapping(cls, mapping: dict):
    """Build dataclass ``cls`` from string (or typed) values; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in mapping.items()}
    return cls(**kwargs)


def to_text(obj) -> str:
    return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(obj).items())


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
