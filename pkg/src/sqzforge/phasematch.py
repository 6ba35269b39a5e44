"""Effective-index sweeps, phase-matching and index-matching searches, ring resonances."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .errors import ConfigurationError, WavelengthRangeError
from .geometry import DEFAULT_SIDEWALL, CrossSection, Grid2D, LayerStack
from .material import T_ROOM, MaterialLibrary, permittivity_tensor
from .modesolver import select_mode, solve_modes

C_LIGHT = 299792458.0

# Shift targets and eigenpair counts that reach the target modes.
_MODE_SEARCH = {("TE", 0): (None, 4), ("TM", 0): (None, 6)}


@dataclass(frozen=True, eq=False)
class DispersionCurve:
    """Effective index of one mode versus a swept variable (ascending)."""

    variable: str
    values: np.ndarray
    n_eff: np.ndarray
    wavelength: float | None = None
    label: str = ""
    cutoff: tuple[float, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        n = np.asarray(self.n_eff, dtype=float)
        if v.shape != n.shape:
            raise ConfigurationError("sweep values and n_eff must have equal length")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(n))):
            raise ConfigurationError("dispersion curve values must be finite")
        order = np.argsort(v, kind="stable")
        v, n = v[order], n[order]
        if np.any(np.diff(v) <= 0):
            raise ConfigurationError("sweep variable must be strictly monotone")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "n_eff", n)

    def __len__(self):
        return len(self.values)

    @property
    def empty(self) -> bool:
        return len(self.values) == 0

    def interpolator(self) -> Callable:
        if len(self.values) == 1:
            v0, n0 = float(self.values[0]), float(self.n_eff[0])

            def single(x):
                return np.where(np.isclose(x, v0), n0, np.nan)
            return single
        return PchipInterpolator(self.values, self.n_eff, extrapolate=False)

    def to_csv(self) -> str:
        lines = [f"{self.variable},n_eff"]
        lines += [f"{v:.6f},{n:.10f}" for v, n in zip(self.values, self.n_eff)]
        return "\n".join(lines) + "\n"


def solve_selected_mode(xs: CrossSection, wavelength: float, selector, *, h: float = 0.02,
                        margin: float = 1.5, temperature: float = T_ROOM, library=None,
                        n_modes: int | None = None, n_eff_guess: float | None = None):
    """The ``(polarization, order)`` mode of ``xs``, or None when it is not guided.

    The eigen-window is widened until the mode appears or the solver runs out
    of guided modes.
    """
    grid = Grid2D.around(xs, h, margin=margin)
    pmap = permittivity_tensor(xs.stack, xs, wavelength, temperature, grid, library, margin)
    guess, count = _MODE_SEARCH.get(tuple(selector), (None, 12))
    count = n_modes or count
    guess = n_eff_guess if n_eff_guess is not None else guess
    midline = 0.5 * xs.stack.film_thickness
    while True:
        modes = solve_modes(pmap, grid, wavelength, n_modes=count, n_eff_guess=guess,
                            midline_y=midline)
        mode = select_mode(modes, selector)
        if mode is not None or count >= 48 or len(modes) < count // 2:
            return mode
        count *= 2


def sweep_neff(stack: LayerStack, widths: Sequence[float], wavelength: float, selector, *,
               sidewall_angle: float = DEFAULT_SIDEWALL, h: float = 0.02, margin: float = 1.5,
               temperature: float = T_ROOM, library: MaterialLibrary | None = None,
               n_modes: int | None = None, n_eff_guess: float | None = None,
               jobs: int = 1) -> DispersionCurve:
    """Effective index of the ``(polarization, order)`` mode across top widths.

    Widths where the mode is not found are listed in ``cutoff``. Points are
    independent and may be evaluated by ``jobs`` worker threads; the result
    is ordered by width whatever the completion order.
    """
    widths = [float(w) for w in widths]
    d = np.diff(widths)
    if len(widths) > 1 and not (np.all(d > 0) or np.all(d < 0)):
        raise ConfigurationError("widths must be strictly monotone")
    selector = tuple(selector)

    def run(w):
        xs = CrossSection(w, sidewall_angle, stack)
        mode = solve_selected_mode(xs, wavelength, selector, h=h, margin=margin,
                                   temperature=temperature, library=library,
                                   n_modes=n_modes, n_eff_guess=n_eff_guess)
        return None if mode is None else mode.n_eff

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, widths))
    else:
        results = [run(w) for w in widths]
    found = [(w, n) for w, n in zip(widths, results) if n is not None]
    cutoff = tuple(sorted(w for w, n in zip(widths, results) if n is None))
    return DispersionCurve(
        "top_width_um",
        np.array([w for w, _ in found]), np.array([n for _, n in found]),
        wavelength=wavelength, label=f"{selector[0]}{selector[1]}", cutoff=cutoff)


@dataclass(frozen=True)
class PhaseMatch:
    crossed: bool
    width: float
    delta: float
    n_eff: float = float("nan")
    crossings: int = 0


def find_phasematch_width(curve_a: DispersionCurve, curve_b: DispersionCurve,
                          tol: float = 1e-5) -> PhaseMatch:
    """Width where two interpolated dispersion curves cross.

    Bisection on the monotone-cubic interpolated difference. Without a sign
    change the result has ``crossed=False`` and carries the smallest
    ``|dn|`` found and its location.
    """
    if curve_a.empty or curve_b.empty:
        raise ConfigurationError("cannot search a crossing on an empty curve")
    lo = max(curve_a.values[0], curve_b.values[0])
    hi = min(curve_a.values[-1], curve_b.values[-1])
    if lo > hi:
        raise ConfigurationError("dispersion curves do not overlap")
    fa, fb = curve_a.interpolator(), curve_b.interpolator()

    def diff(x):
        return float(fa(x) - fb(x))

    nodes = np.union1d(curve_a.values, curve_b.values)
    nodes = nodes[(nodes >= lo) & (nodes <= hi)]
    nodes = np.union1d(nodes, [lo, hi])
    d = np.array([diff(x) for x in nodes])
    if np.all(np.abs(d) < 1e-12):
        raise ConfigurationError("degenerate input: the two curves coincide")

    brackets = []
    for i, x in enumerate(nodes):
        if d[i] == 0.0:
            brackets.append((x, x))
        elif i + 1 < len(nodes) and d[i] * d[i + 1] < 0:
            brackets.append((x, nodes[i + 1]))
    if not brackets:
        fine = np.linspace(lo, hi, 2001) if hi > lo else np.array([lo])
        df = np.abs(fa(fine) - fb(fine))
        k = int(np.nanargmin(df))
        return PhaseMatch(False, float(fine[k]), float(df[k]))

    a, b = brackets[0]
    if a == b:
        x = a
    else:
        da = diff(a)
        for _ in range(200):
            x = 0.5 * (a + b)
            dx = diff(x)
            if dx == 0.0 or (abs(dx) < tol and b - a < 1e-9):
                break
            if da * dx < 0:
                b = x
            else:
                a, da = x, dx
            if b - a < 1e-13:
                break
    return PhaseMatch(True, float(x), abs(diff(x)), float(fa(x)), len(brackets))


def find_pulley_match(bus_curve: DispersionCurve, target_n_eff: float,
                      tol: float = 1e-5) -> PhaseMatch:
    """Bus width whose mode index equals a fixed ring-mode index."""
    const = DispersionCurve(bus_curve.variable, bus_curve.values,
                            np.full(len(bus_curve), float(target_n_eff)), label="target")
    return find_phasematch_width(bus_curve, const, tol)


@dataclass(frozen=True)
class RingGeometry:
    """Ring of ``radius`` um whose round-trip index follows ``neff``.

    ``neff`` is a constant, a callable of wavelength (um), or a
    :class:`DispersionCurve` over wavelength. Temperature enters through the
    linear coefficient ``dn_dT`` (1/K) about ``t_ref``.
    """

    radius: float = 70.0
    neff: object = 2.0
    dn_dT: float | None = None
    t_ref: float = T_ROOM
    _fn: Callable = field(init=False, repr=False, compare=False)
    _range: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigurationError("ring radius must be positive")
        model = self.neff
        rng = (0.0, math.inf)
        if isinstance(model, DispersionCurve):
            interp = model.interpolator()
            rng = (float(model.values[0]), float(model.values[-1]))
            fn = lambda lam: float(interp(lam))
        elif callable(model):
            fn = lambda lam: float(model(lam))
        else:
            value = float(model)
            fn = lambda lam: value
        object.__setattr__(self, "_fn", fn)
        object.__setattr__(self, "_range", rng)

    def n_eff(self, wavelength: float, temperature: float | None = None) -> float:
        lo, hi = self._range
        if not lo <= wavelength <= hi:
            raise WavelengthRangeError(
                f"ring n_eff model covers [{lo}, {hi}] um, asked for {wavelength} um")
        n = self._fn(wavelength)
        if temperature is not None and temperature != self.t_ref:
            if self.dn_dT is None:
                raise ConfigurationError("ring has no thermo-optic coefficient configured")
            n += self.dn_dT * (temperature - self.t_ref)
        return n

    def phase_number(self, wavelength: float, temperature: float | None = None) -> float:
        """Round-trip phase in units of 2 pi: ``2 pi R n_eff / lambda``."""
        return 2 * math.pi * self.radius * self.n_eff(wavelength, temperature) / wavelength


@dataclass(frozen=True)
class Resonance:
    m: int
    wavelength: float


def _resonance(ring: RingGeometry, m: int, lam0: float, lo: float, hi: float,
               temperature) -> float | None:
    def g(lam):
        return m * lam - 2 * math.pi * ring.radius * ring.n_eff(lam, temperature)

    lam = lam0
    for _ in range(100):
        new = 2 * math.pi * ring.radius * ring.n_eff(min(max(lam, lo), hi), temperature) / m
        if abs(new - lam) < 1e-13:
            lam = new
            break
        lam = new
    if lo <= lam <= hi and abs(g(lam)) < 1e-9:
        return lam
    # fall back to bisection when the fixed point wanders or stalls
    ga, gb = g(lo), g(hi)
    if ga * gb > 0:
        return None
    return brentq(g, lo, hi, xtol=1e-14, rtol=1e-15)


def ring_resonances(ring: RingGeometry, window: tuple[float, float],
                    temperature: float | None = None) -> list[Resonance]:
    """All resonances ``m * lambda = 2 pi R n_eff(lambda, T)`` inside ``window``.

    Sorted by azimuthal order ``m`` (ascending), so wavelengths descend.
    """
    lo, hi = sorted(float(w) for w in window)
    ring.n_eff(lo, temperature)
    ring.n_eff(hi, temperature)
    samples = np.linspace(lo, hi, 65)
    phase = np.array([ring.phase_number(x, temperature) for x in samples])
    m_lo, m_hi = math.ceil(phase.min()), math.floor(phase.max())
    out = []
    for m in range(max(m_lo, 1), m_hi + 1):
        guess = float(np.interp(m, phase[::-1], samples[::-1])) if phase[0] > phase[-1] \
            else float(np.interp(m, phase, samples))
        lam = _resonance(ring, m, guess, lo, hi, temperature)
        if lam is not None:
            out.append(Resonance(m, lam))
    return out


@dataclass(frozen=True)
class DoubleResonance:
    detuning_ghz: float
    delta_t: float | None
    reachable: bool
    signal: Resonance
    pump: Resonance


def _freq_ghz(lam_um: float) -> float:
    return C_LIGHT / (lam_um * 1e-6) / 1e9


def double_resonance_detuning(signal_ring: RingGeometry, pump_ring: RingGeometry,
                              signal_wavelength: float, temperature: float = T_ROOM,
                              dt_max: float = 10.0) -> DoubleResonance:
    """Detuning of the nearest pump resonance from the degenerate point.

    ``detuning = 2 nu_s - nu_p`` in GHz, with the signal resonance nearest
    ``signal_wavelength`` and the pump resonance nearest half of it. The
    temperature offset that nulls the detuning is searched within
    ``+-dt_max`` K, keeping the azimuthal orders fixed.
    """
    for ring in (signal_ring, pump_ring):
        if ring.dn_dT is None:
            raise ConfigurationError("double-resonance tuning needs dn_dT on both rings")

    def solve(ring, m, lam_guess, T):
        lam = lam_guess
        for _ in range(200):
            new = 2 * math.pi * ring.radius * ring.n_eff(lam, T) / m
            if abs(new - lam) < 1e-14:
                return new
            lam = new
        return lam

    m_s = round(signal_ring.phase_number(signal_wavelength, temperature))
    lam_s = solve(signal_ring, m_s, signal_wavelength, temperature)
    half = 0.5 * lam_s
    m_p0 = round(pump_ring.phase_number(half, temperature))

    def detuning(m_p, T):
        ls = solve(signal_ring, m_s, lam_s, T)
        lp = solve(pump_ring, m_p, half, T)
        return 2 * _freq_ghz(ls) - _freq_ghz(lp)

    candidates = [m for m in (m_p0 - 1, m_p0, m_p0 + 1) if m > 0]
    m_p = min(candidates, key=lambda m: abs(detuning(m, temperature)))
    lam_p = solve(pump_ring, m_p, half, temperature)
    det = detuning(m_p, temperature)
    signal = Resonance(m_s, lam_s)
    pump = Resonance(m_p, lam_p)
    if det == 0.0:
        return DoubleResonance(0.0, 0.0, True, signal, pump)
    if dt_max <= 0:
        return DoubleResonance(det, None, False, signal, pump)

    best = None
    for m in candidates:
        ts = temperature + np.linspace(-dt_max, dt_max, 401)
        ds = np.array([detuning(m, t) for t in ts])
        for i in range(len(ts) - 1):
            if ds[i] == 0 or ds[i] * ds[i + 1] < 0:
                root = ts[i] if ds[i] == 0 else brentq(
                    lambda t: detuning(m, t), ts[i], ts[i + 1], xtol=1e-12, rtol=1e-14)
                if best is None or abs(root - temperature) < abs(best - temperature):
                    best = root
    if best is None:
        return DoubleResonance(det, None, False, signal, pump)
    return DoubleResonance(det, float(best - temperature), True, signal, pump)
