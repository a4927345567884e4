"""``key = value`` text configuration shared by every command.

Blank lines and ``#`` comments are ignored.  Values are parsed into the type
of the matching dataclass field; list fields take comma-separated values.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError


def parse_kv(text: str) -> dict[str, tuple[str, int]]:
    """Map each key to ``(raw_value, line_number)``."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key=value, got {stripped!r}", lineno)
        key, value = (s.strip() for s in stripped.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        out[key] = (value, lineno)
    return out


def read_kv(path) -> dict[str, tuple[str, int]]:
    return parse_kv(Path(path).read_text())


def _convert(raw: str, tp, key: str, lineno: int):
    origin = typing.get_origin(tp)
    try:
        if origin in (list, tuple):
            (inner, *_) = typing.get_args(tp) or (float,)
            items = [s.strip() for s in raw.split(",") if s.strip()]
            vals = [_convert(s, inner, key, lineno) for s in items]
            return tuple(vals) if origin is tuple else vals
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}", lineno) from None


def populate(cls, entries: dict[str, tuple[str, int]], strict: bool = False):
    """Build dataclass ``cls`` from the entries whose keys match its fields.

    With ``strict`` unknown keys raise; otherwise they are left for other
    sections of the same file.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, (raw, lineno) in entries.items():
        if key in names:
            kwargs[key] = _convert(raw, hints[key], key, lineno)
        elif strict:
            raise ConfigError(f"unknown key {key!r}", lineno)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        line = min((ln for k, (_, ln) in entries.items() if k in kwargs), default=None)
        raise ConfigError(str(exc), line) from None


def check_known(entries: dict[str, tuple[str, int]], *classes) -> None:
    known = set()
    for cls in classes:
        known |= {f.name for f in dataclasses.fields(cls)}
    for key, (_, lineno) in entries.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", lineno)


def dump(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, (list, tuple)):
            v = ", ".join(repr(x) if isinstance(x, str) else f"{x!r}" for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
