"""Strict key/value section files.

Every file handled by sqzforge (material coefficients, stack geometry, run
configuration) uses the same grammar::

    # comment
    [section]
    key = value
    list_key = 1.0, 2.0, 3.0

Keys are case sensitive, duplicate sections or keys are errors, there is no
interpolation, and callers declare the keys they accept so that typos are
rejected instead of silently ignored.
"""
from __future__ import annotations

import configparser
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigurationError


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(
        interpolation=None, strict=True, comment_prefixes=("#", ";"),
        inline_comment_prefixes=None, default_section="__none__")
    parser.optionxform = str
    return parser


def loads(text: str, source: str = "<string>") -> dict[str, dict[str, str]]:
    parser = _parser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc
    return {name: dict(parser[name]) for name in parser.sections()}


def load(path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"file not found: {path}")
    return loads(path.read_text(), source=str(path))


def dumps(sections: Mapping[str, Mapping[str, object]], header: str = "") -> str:
    lines = [f"# {line}" if line else "#" for line in header.splitlines()]
    if lines:
        lines.append("")
    for name, body in sections.items():
        lines.append(f"[{name}]")
        for key, value in body.items():
            lines.append(f"{key} = {format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def check_keys(section: str, body: Mapping[str, str], allowed: Iterable[str],
               required: Iterable[str] = ()) -> None:
    allowed = set(allowed)
    unknown = sorted(set(body) - allowed)
    if unknown:
        raise ConfigurationError(
            f"[{section}]: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")
    missing = sorted(set(required) - set(body))
    if missing:
        raise ConfigurationError(f"[{section}]: missing key(s) {', '.join(missing)}")


def as_float(section: str, key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigurationError(f"[{section}] {key}: expected a number, got {value!r}") from None


def as_int(section: str, key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"[{section}] {key}: expected an integer, got {value!r}") from None


def as_floats(section: str, key: str, value: str) -> list[float]:
    parts = [p.strip() for p in value.split(",") if p.strip()]
    return [as_float(section, key, p) for p in parts]


def as_bool(section: str, key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"[{section}] {key}: expected a boolean, got {value!r}")


def atomic_write(path, data: str | bytes) -> None:
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    umask = os.umask(0)
    os.umask(umask)
    os.chmod(tmp, 0o666 & ~umask)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
