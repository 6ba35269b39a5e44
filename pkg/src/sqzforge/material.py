"""Refractive-index models and permittivity maps of the layer stack.

Wavelengths are in micrometres and temperatures in kelvin throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping

import numpy as np

from . import kvconfig
from .errors import ConfigurationError, WavelengthRangeError
from .geometry import CrossSection, Grid2D, LayerStack

T_ROOM = 293.15

FORMS = ("sellmeier", "ciddor")
MODEL_KEYS = ("form", "coefficients", "validity", "dn_dt", "t_ref", "source")


@dataclass(frozen=True)
class DispersionModel:
    name: str
    coefficients: tuple[float, ...]
    validity: tuple[float, float]
    thermo_optic: float | None = 0.0
    form: str = "sellmeier"
    t_ref: float = T_ROOM
    source: str = ""

    def __post_init__(self):
        if self.form not in FORMS:
            raise ConfigurationError(f"{self.name}: unknown dispersion form {self.form!r}")
        if len(self.coefficients) == 0 or len(self.coefficients) % 2:
            raise ConfigurationError(f"{self.name}: coefficients must come in (B, C) pairs")
        lo, hi = self.validity
        if not 0 < lo < hi:
            raise ConfigurationError(f"{self.name}: bad validity range {self.validity}")

    def n(self, wavelength, temperature=None):
        """Refractive index at ``wavelength`` (um) and ``temperature`` (K)."""
        lam = np.asarray(wavelength, dtype=float)
        lo, hi = self.validity
        if np.any(lam < lo) or np.any(lam > hi):
            raise WavelengthRangeError(
                f"{self.name}: wavelength {wavelength} um outside validity [{lo}, {hi}] um")
        b = np.asarray(self.coefficients[0::2])
        c = np.asarray(self.coefficients[1::2])
        lam2 = lam[..., None] ** 2
        if self.form == "sellmeier":
            n = np.sqrt(1.0 + np.sum(b * lam2 / (lam2 - c), axis=-1))
        else:
            n = 1.0 + np.sum(b / (c - 1.0 / lam2), axis=-1)
        if temperature is not None and temperature != self.t_ref:
            if self.thermo_optic is None:
                raise ConfigurationError(f"{self.name}: no thermo-optic coefficient configured")
            n = n + (temperature - self.t_ref) * self.thermo_optic
        return n if n.ndim else float(n)


def index(material: DispersionModel, wavelength, temperature=None):
    """Refractive index ``n(lambda) + (T - T_ref) dn/dT``."""
    return material.n(wavelength, temperature)


@dataclass(frozen=True)
class Material:
    """An isotropic material or a uniaxial crystal (ordinary/extraordinary)."""

    name: str
    ordinary: DispersionModel
    extraordinary: DispersionModel | None = None

    @property
    def uniaxial(self) -> bool:
        return self.extraordinary is not None

    def indices(self, wavelength, temperature=None) -> tuple[float, float]:
        """(n_o, n_e); equal for isotropic materials."""
        no = self.ordinary.n(wavelength, temperature)
        ne = no if self.extraordinary is None else self.extraordinary.n(wavelength, temperature)
        return no, ne


class MaterialLibrary(Mapping[str, Material]):
    """Named materials loaded from a coefficient file."""

    def __init__(self, models: Mapping[str, DispersionModel]):
        self.models = dict(models)
        grouped: dict[str, dict[str, DispersionModel]] = {}
        for key, model in self.models.items():
            base, _, axis = key.partition(".")
            grouped.setdefault(base, {})[axis or "iso"] = model
        self._materials = {}
        for base, axes in grouped.items():
            if "iso" in axes:
                if len(axes) > 1:
                    raise ConfigurationError(f"{base}: mixes isotropic and axis sections")
                self._materials[base] = Material(base, axes["iso"])
            else:
                if set(axes) != {"ordinary", "extraordinary"}:
                    raise ConfigurationError(
                        f"{base}: uniaxial material needs exactly .ordinary and .extraordinary")
                self._materials[base] = Material(base, axes["ordinary"], axes["extraordinary"])

    def __getitem__(self, name: str) -> Material:
        try:
            return self._materials[name]
        except KeyError:
            raise ConfigurationError(
                f"unknown material {name!r}; known: {', '.join(sorted(self._materials))}") from None

    def __iter__(self):
        return iter(self._materials)

    def __len__(self):
        return len(self._materials)

    def dumps(self) -> str:
        sections = {}
        for key, m in self.models.items():
            body = {
                "form": m.form,
                "coefficients": [float(c) for c in m.coefficients],
                "validity": [float(v) for v in m.validity],
                "t_ref": float(m.t_ref),
            }
            if m.thermo_optic is not None:
                body["dn_dt"] = float(m.thermo_optic)
            if m.source:
                body["source"] = m.source
            sections[key] = body
        return kvconfig.dumps(sections, header="sqzforge material coefficient set")

    @classmethod
    def loads(cls, text: str, source: str = "<string>") -> "MaterialLibrary":
        return cls._from_sections(kvconfig.loads(text, source))

    @classmethod
    def load(cls, path) -> "MaterialLibrary":
        return cls._from_sections(kvconfig.load(path))

    @classmethod
    def _from_sections(cls, sections) -> "MaterialLibrary":
        models = {}
        for name, body in sections.items():
            kvconfig.check_keys(name, body, MODEL_KEYS, required=("coefficients", "validity"))
            validity = kvconfig.as_floats(name, "validity", body["validity"])
            if len(validity) != 2:
                raise ConfigurationError(f"[{name}] validity: expected two numbers")
            dn_dt = kvconfig.as_float(name, "dn_dt", body["dn_dt"]) if "dn_dt" in body else None
            models[name] = DispersionModel(
                name=name,
                coefficients=tuple(kvconfig.as_floats(name, "coefficients", body["coefficients"])),
                validity=(validity[0], validity[1]),
                thermo_optic=dn_dt,
                form=body.get("form", "sellmeier").strip(),
                t_ref=kvconfig.as_float(name, "t_ref", body["t_ref"]) if "t_ref" in body else T_ROOM,
                source=body.get("source", "").strip(),
            )
        return cls(models)


@lru_cache(maxsize=1)
def default_library() -> MaterialLibrary:
    """The bundled coefficient set (``sqzforge/data/materials.ini``)."""
    text = resources.files("sqzforge").joinpath("data/materials.ini").read_text()
    return MaterialLibrary.loads(text, source="materials.ini")


@dataclass(frozen=True, eq=False)
class PermittivityMap:
    """Diagonal relative permittivity sampled at the staggered component sites.

    Components are in the waveguide frame: x horizontal, y vertical, z along
    propagation. Arrays have shape ``(nx, ny)``.
    """

    exx: np.ndarray
    eyy: np.ndarray
    ezz: np.ndarray

    def __post_init__(self):
        shapes = {self.exx.shape, self.eyy.shape, self.ezz.shape}
        if len(shapes) != 1:
            raise ConfigurationError("permittivity components must share one shape")
        for comp in (self.exx, self.eyy, self.ezz):
            if not np.all(np.isfinite(comp)) or np.any(comp <= 0):
                raise ConfigurationError("permittivity must be finite and positive")

    @property
    def shape(self):
        return self.exx.shape

    @property
    def n_max(self) -> float:
        return float(np.sqrt(max(self.exx.max(), self.eyy.max(), self.ezz.max())))

    @property
    def n_min(self) -> float:
        return float(np.sqrt(min(self.exx.min(), self.eyy.min(), self.ezz.min())))

    @classmethod
    def isotropic(cls, eps) -> "PermittivityMap":
        eps = np.asarray(eps, dtype=float)
        return cls(eps.copy(), eps.copy(), eps.copy())


# Offsets of the averaging box centre, in cells, for each component site.
_SITES = {"exx": (0.5, 0.0), "eyy": (0.0, 0.5), "ezz": (0.0, 0.0)}


def _overlap(a0, a1, b0, b1):
    return np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0.0, None)


def region_fractions(xs: CrossSection, grid: Grid2D, site=(0.0, 0.0), n_sub: int = 16):
    """Area fractions of each region inside the averaging box of every site.

    Returns a dict with keys ``substrate``, ``box``, ``film`` and ``cladding``,
    each an ``(nx, ny)`` array; the fractions sum to one.
    """
    s = xs.stack
    x = grid.origin[0] + (np.arange(grid.nx) + site[0]) * grid.dx
    y = grid.origin[1] + (np.arange(grid.ny) + site[1]) * grid.dy
    x0, x1 = x - grid.dx / 2, x + grid.dx / 2
    y0, y1 = y - grid.dy / 2, y + grid.dy / 2
    inf = np.inf
    fy_sub = _overlap(y0, y1, -inf, -s.box_thickness) / grid.dy
    fy_box = _overlap(y0, y1, -s.box_thickness, 0.0) / grid.dy
    fy_slab = _overlap(y0, y1, 0.0, s.slab_thickness) / grid.dy
    fy_ridge = _overlap(y0, y1, s.slab_thickness, s.film_thickness) / grid.dy
    fy_top = _overlap(y0, y1, s.film_thickness, inf) / grid.dy

    # fraction of the ridge-layer part of each box that lies inside the ridge
    lo = np.maximum(y0, s.slab_thickness)
    hi = np.minimum(y1, s.film_thickness)
    if xs.sidewall_angle == 90.0:
        hw = np.full((1, grid.ny), 0.5 * xs.top_width)
        fx_in = _overlap(x0[:, None], x1[:, None], -hw, hw) / grid.dx
    else:
        t = (np.arange(n_sub) + 0.5) / n_sub
        ys = lo[None, :] + t[:, None] * np.clip(hi - lo, 0.0, None)[None, :]
        hw = xs.half_width_at(ys)
        fx_in = np.mean(
            _overlap(x0[None, :, None], x1[None, :, None], -hw[:, None, :], hw[:, None, :]),
            axis=0) / grid.dx
    ridge_in = fx_in * fy_ridge[None, :]
    ones = np.ones((grid.nx, 1))
    return {
        "substrate": ones * fy_sub,
        "box": ones * fy_box,
        "film": ones * fy_slab + ridge_in,
        "cladding": ones * (fy_top + fy_ridge) - ridge_in,
    }


def permittivity_tensor(stack: LayerStack, cross_section: CrossSection, wavelength: float,
                        temperature: float = T_ROOM, grid: Grid2D | None = None,
                        library: MaterialLibrary | None = None,
                        min_margin: float = 1.5) -> PermittivityMap:
    """Area-averaged diagonal permittivity of a ridge on ``grid``.

    The film is Z-cut: its extraordinary axis is vertical, so in the
    waveguide frame ``eyy = n_e**2`` and ``exx = ezz = n_o**2``.
    """
    if grid is None:
        raise ConfigurationError("a Grid2D is required")
    if cross_section.stack != stack:
        cross_section = CrossSection(cross_section.top_width, cross_section.sidewall_angle, stack)
    lib = default_library() if library is None else library
    xa, xb, ya, yb = grid.extent
    half = 0.5 * cross_section.bottom_width
    tol = 1e-9
    if (xa > -half - min_margin + tol or xb < half + min_margin - tol
            or ya > -min_margin + tol or yb < stack.film_thickness + min_margin - tol):
        raise ConfigurationError(
            f"grid window x=[{xa:.3f}, {xb:.3f}] y=[{ya:.3f}, {yb:.3f}] um does not contain "
            f"the core with a {min_margin} um margin on each side")

    fractions = {comp: region_fractions(cross_section, grid, site) for comp, site in _SITES.items()}
    out = {comp: np.zeros((grid.nx, grid.ny)) for comp in _SITES}
    for region in ("substrate", "box", "film", "cladding"):
        if not any(np.any(fractions[comp][region] > 0) for comp in _SITES):
            continue
        no, ne = lib[getattr(stack, region)].indices(wavelength, temperature)
        values = {"exx": no ** 2, "eyy": ne ** 2, "ezz": no ** 2}
        for comp in _SITES:
            out[comp] += fractions[comp][region] * values[comp]
    return PermittivityMap(**out)


def mixed_cell_fraction(cross_section: CrossSection, grid: Grid2D, component: str = "ezz") -> float:
    """Fraction of ``component`` sites whose averaging box straddles an interface."""
    fr = region_fractions(cross_section, grid, _SITES[component])
    dominant = np.max(np.stack(list(fr.values())), axis=0)
    return float(np.mean(dominant < 1.0 - 1e-12))
