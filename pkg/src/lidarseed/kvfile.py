"""Plain-text ``key = value`` files used for calibration, beam and pipeline configs."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping


class KVFormatError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise KVFormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise KVFormatError(f"line {lineno}: empty key")
        if key in out:
            raise KVFormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return " ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_kv(path: str | Path, items: Mapping[str, object] | Iterable[tuple[str, object]]) -> None:
    pairs = items.items() if isinstance(items, Mapping) else items
    lines = [f"{k} = {format_value(v)}" for k, v in pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def floats(value: str) -> list[float]:
    return [float(tok) for tok in value.split()]
