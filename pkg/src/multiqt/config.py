"""``key = value`` config files mapped onto frozen dataclasses."""
from __future__ import annotations

import ast
import dataclasses
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def _coerce(raw: str, current: Any, where: str):
    text = raw.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    if isinstance(current, (int, float)) and not isinstance(current, bool):
        try:
            value = float(text) if isinstance(current, float) else int(text)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {text!r}") from None
        return value
    if isinstance(current, tuple):
        try:
            value = ast.literal_eval(text)
        except (ValueError, SyntaxError):
            raise ConfigError(f"{where}: expected a tuple literal, got {text!r}") from None

        def tup(v):
            return tuple(tup(x) for x in v) if isinstance(v, (list, tuple)) else v
        return tup(value)
    return text


def parse_text(text: str, base, source: str = "<config>"):
    """Apply ``key = value`` lines (``#`` comments) to dataclass instance ``base``."""
    updates: dict[str, Any] = {}
    names = {f.name for f in dataclasses.fields(base)}
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{n}"
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
        updates[key] = _coerce(value, getattr(base, key), where)
    try:
        return dataclasses.replace(base, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_file(path: str | Path, base):
    path = Path(path)
    return parse_text(path.read_text(), base, str(path))


def to_text(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        lines.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
