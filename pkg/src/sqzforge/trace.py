"""Sampled 1-D series and their CSV representation.

File layout::

    # key=value          (any number of metadata lines)
    wavelength_nm,transmission_frac
    1549.99,0.998
    ...

The first column is the x axis and must be strictly monotone; its header
names the kind and unit. Further columns are values. The same grammar is
used for simulator output and for measured data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .kvconfig import atomic_write

X_KINDS = ("wavelength_nm", "time_s", "frequency_hz", "frequency_mhz", "power_mw", "top_width_um",
           "scan_speed_nm_per_s")


class SchemaError(ConfigurationError):
    """A table file violates the CSV schema; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(eq=False)
class Trace:
    x_kind: str
    x: np.ndarray
    y: np.ndarray
    y_name: str = "value"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x_kind not in X_KINDS:
            raise ConfigurationError(f"unknown x kind {self.x_kind!r}; use one of {X_KINDS}")
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ConfigurationError("trace x and y must be 1-D and of equal length")
        d = np.diff(self.x)
        if len(d) and not (np.all(d > 0) or np.all(d < 0)):
            raise ConfigurationError("trace x must be strictly monotone")

    def __len__(self):
        return len(self.x)

    def ascending(self) -> "Trace":
        if len(self.x) > 1 and self.x[1] < self.x[0]:
            return Trace(self.x_kind, self.x[::-1], self.y[::-1], self.y_name, dict(self.meta))
        return self

    def decimate(self, max_points: int) -> "Trace":
        if len(self) <= max_points:
            return self
        step = int(np.ceil(len(self) / max_points))
        idx = np.arange(0, len(self), step)
        if idx[-1] != len(self) - 1:
            idx = np.append(idx, len(self) - 1)
        return Trace(self.x_kind, self.x[idx], self.y[idx], self.y_name, dict(self.meta))

    def to_csv(self, fmt: str = "%.10g") -> str:
        return write_table(self.meta, [self.x_kind, self.y_name], [self.x, self.y], fmt)


def _fmt_meta(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table(meta: dict, names, columns, fmt: str = "%.10g") -> str:
    lines = [f"# {k}={_fmt_meta(v)}" for k, v in meta.items()]
    lines.append(",".join(names))
    cols = [np.asarray(c, dtype=float) for c in columns]
    for row in zip(*cols):
        lines.append(",".join(fmt % v for v in row))
    return "\n".join(lines) + "\n"


def read_table(text: str, source: str = "<string>"):
    """Parse a table; returns ``(meta, names, columns)`` after schema checks."""
    meta = {}
    names = None
    rows = []
    row_lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if names is not None:
                raise SchemaError("metadata lines must precede the column header", lineno)
            body = line[1:].strip()
            if "=" not in body:
                raise SchemaError(f"metadata line must be key=value, got {body!r}", lineno)
            k, v = body.split("=", 1)
            meta[k.strip()] = v.strip()
            continue
        cells = [c.strip() for c in line.split(",")]
        if names is None:
            names = cells
            if names[0] not in X_KINDS:
                raise SchemaError(
                    f"first column must be one of {', '.join(X_KINDS)}, got {names[0]!r}", lineno)
            if len(names) < 2:
                raise SchemaError("table needs an x column and at least one value column", lineno)
            continue
        if len(cells) != len(names):
            raise SchemaError(f"expected {len(names)} fields, got {len(cells)}", lineno)
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            raise SchemaError(f"non-numeric field in {line!r}", lineno) from None
        row_lines.append(lineno)
    if names is None:
        raise SchemaError(f"{source}: no column header found")
    if not rows:
        raise SchemaError(f"{source}: no data rows")
    data = np.array(rows)
    x = data[:, 0]
    if len(x) > 1:
        d = np.diff(x)
        direction = 1.0 if d[0] > 0 else -1.0
        bad = np.nonzero(d * direction <= 0)[0]
        if len(bad):
            raise SchemaError("x column must be strictly monotone (schema rule: monotone x)",
                              row_lines[bad[0] + 1])
    return meta, names, [data[:, i] for i in range(data.shape[1])]


def read_trace(path_or_text, y_name: str | None = None) -> Trace:
    text, source = _text(path_or_text)
    meta, names, cols = read_table(text, source)
    k = 1 if y_name is None else names.index(y_name)
    return Trace(names[0], cols[0], cols[k], names[k], meta)


def _text(path_or_text):
    if isinstance(path_or_text, Path) or ("\n" not in str(path_or_text)):
        path = Path(path_or_text)
        if not path.is_file():
            raise ConfigurationError(f"file not found: {path}")
        return path.read_text(), str(path)
    return str(path_or_text), "<string>"


def write_trace(trace: Trace, path, max_points: int | None = None) -> None:
    t = trace if max_points is None else trace.decimate(max_points)
    atomic_write(path, t.to_csv())
