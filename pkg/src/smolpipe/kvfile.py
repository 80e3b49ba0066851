"""Flat ``key=value`` text files used for configs, manifests and presets."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping


class KVFormatError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    return {k: v for k, (v, _) in parse_kv_lines(text, source).items()}


def parse_kv_lines(text: str, source: str = "<string>") -> dict[str, tuple[str, int]]:
    """Like :func:`parse_kv` but keeps the line number of every key."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise KVFormatError(source, lineno, f"expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise KVFormatError(source, lineno, "empty key")
        if key in out:
            raise KVFormatError(source, lineno, f"duplicate key {key!r}")
        out[key] = (value.strip(), lineno)
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(), source=str(path))


def format_kv(values: Mapping[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def write_kv(path: str | Path, values: Mapping[str, object]) -> None:
    Path(path).write_text(format_kv(values))
