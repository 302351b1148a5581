"""Flat ``key = value`` configuration files."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse UTF-8 ``key = value`` lines.

    ``#`` starts a comment, blank lines are skipped and keys are normalized
    so ``beam-size`` and ``beam_size`` are the same key.
    """
    out: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw!r}")
        if key in out:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from None
    return parse_config(text, str(path))


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def to_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")
