"""Layer stack, ridge cross-section and computational grid."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kvconfig
from .errors import ConfigurationError


@dataclass(frozen=True)
class LayerStack:
    """Vertical material stack of a partially etched thin-film ridge.

    Lengths are in micrometres. The film is uniaxial with its optic axis
    vertical (Z-cut); ``y = 0`` is the film/BOX interface.
    """

    film_thickness: float = 0.5
    etch_depth: float = 0.40
    box_thickness: float = 4.7
    film: str = "lithium_niobate"
    box: str = "silica"
    substrate: str = "silicon"
    cladding: str = "air"

    def __post_init__(self):
        if self.film_thickness <= 0 or self.box_thickness <= 0:
            raise ConfigurationError("film and box thickness must be positive")
        if not 0 < self.etch_depth <= self.film_thickness:
            raise ConfigurationError(
                f"etch depth {self.etch_depth} must satisfy 0 < etch_depth <= film_thickness "
                f"({self.film_thickness})")

    @property
    def slab_thickness(self) -> float:
        return self.film_thickness - self.etch_depth


# Typical for argon-milled thin-film LN ridges; the vertical-wall case is 90.
DEFAULT_SIDEWALL = 70.0


@dataclass(frozen=True)
class CrossSection:
    """Ridge waveguide cross-section: top width and sidewall angle over a stack."""

    top_width: float
    sidewall_angle: float = DEFAULT_SIDEWALL
    stack: LayerStack = field(default_factory=LayerStack)

    def __post_init__(self):
        if self.top_width <= 0:
            raise ConfigurationError(f"top_width must be positive, got {self.top_width}")
        if not 60.0 <= self.sidewall_angle <= 90.0:
            raise ConfigurationError(
                f"sidewall_angle must lie in [60, 90] degrees, got {self.sidewall_angle}")

    @property
    def bottom_width(self) -> float:
        return self.top_width + 2 * self.stack.etch_depth * self._cot()

    def _cot(self) -> float:
        if self.sidewall_angle == 90.0:
            return 0.0
        return 1.0 / math.tan(math.radians(self.sidewall_angle))

    def half_width_at(self, y):
        """Ridge half width at height ``y`` inside the etched layer."""
        return 0.5 * self.top_width + (self.stack.film_thickness - np.asarray(y)) * self._cot()

    def with_width(self, top_width: float) -> "CrossSection":
        return replace(self, top_width=top_width)


@dataclass(frozen=True)
class Grid2D:
    """Uniform rectangular grid of ``nx * ny`` nodes.

    Node ``(i, j)`` sits at ``origin + (i*dx, j*dy)``. Field components are
    staggered around the nodes (see :mod:`sqzforge.modesolver`).
    """

    nx: int
    ny: int
    dx: float
    dy: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 16 or self.ny < 16:
            raise ConfigurationError(f"grid needs at least 16x16 nodes, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise ConfigurationError("grid spacings must be positive")

    @property
    def x(self) -> np.ndarray:
        return self.origin[0] + self.dx * np.arange(self.nx)

    @property
    def y(self) -> np.ndarray:
        return self.origin[1] + self.dy * np.arange(self.ny)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        x, y = self.x, self.y
        return float(x[0]), float(x[-1]), float(y[0]), float(y[-1])

    @classmethod
    def around(cls, xs: CrossSection, h: float, margin: float = 1.5,
               dy: float | None = None) -> "Grid2D":
        """Window around a ridge with ``margin`` on every side.

        The left sidewall foot and the horizontal interfaces are placed on
        grid lines so that only tangential permittivity components are
        averaged there.
        """
        dx = h
        dy = h if dy is None else dy
        half = 0.5 * xs.bottom_width
        pad_x = math.ceil(margin / dx - 1e-9)
        nx = pad_x + math.ceil(2 * half / dx - 1e-9) + pad_x + 1
        pad_y = math.ceil(margin / dy - 1e-9)
        ny = pad_y + math.ceil(xs.stack.film_thickness / dy - 1e-9) + pad_y + 1
        return cls(nx=max(nx, 16), ny=max(ny, 16), dx=dx, dy=dy,
                   origin=(-half - pad_x * dx, -pad_y * dy))


STACK_KEYS = ("film_thickness", "etch_depth", "box_thickness", "film", "box", "substrate", "cladding")
CROSS_SECTION_KEYS = ("top_width", "sidewall_angle")


def stack_from_section(body: dict[str, str], name: str = "stack") -> LayerStack:
    kvconfig.check_keys(name, body, STACK_KEYS)
    kwargs = {}
    for key, value in body.items():
        if key in ("film_thickness", "etch_depth", "box_thickness"):
            kwargs[key] = kvconfig.as_float(name, key, value)
        else:
            kwargs[key] = value.strip()
    return LayerStack(**kwargs)


def cross_section_from_section(body: dict[str, str], stack: LayerStack,
                               name: str = "cross_section") -> CrossSection:
    kvconfig.check_keys(name, body, CROSS_SECTION_KEYS, required=("top_width",))
    kwargs = {key: kvconfig.as_float(name, key, value) for key, value in body.items()}
    return CrossSection(stack=stack, **kwargs)


def geometry_sections(xs: CrossSection) -> dict[str, dict[str, object]]:
    s = xs.stack
    return {
        "stack": {
            "film_thickness": s.film_thickness, "etch_depth": s.etch_depth,
            "box_thickness": s.box_thickness, "film": s.film, "box": s.box,
            "substrate": s.substrate, "cladding": s.cladding,
        },
        "cross_section": {"top_width": xs.top_width, "sidewall_angle": xs.sidewall_angle},
    }


def dump_geometry(xs: CrossSection) -> str:
    return kvconfig.dumps(geometry_sections(xs), header="sqzforge geometry")


def load_geometry(text_or_path) -> CrossSection:
    if isinstance(text_or_path, str) and "[" in text_or_path:
        sections = kvconfig.loads(text_or_path)
    else:
        sections = kvconfig.load(text_or_path)
    unknown = set(sections) - {"stack", "cross_section"}
    if unknown:
        raise ConfigurationError(f"unknown geometry section(s): {', '.join(sorted(unknown))}")
    stack = stack_from_section(sections.get("stack", {}))
    if "cross_section" not in sections:
        raise ConfigurationError("geometry file needs a [cross_section] section")
    return cross_section_from_section(sections["cross_section"], stack)
