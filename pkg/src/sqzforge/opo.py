"""Below-threshold degenerate OPO: gain, noise spectra, loss and efficiency.

Pump powers are on-chip mW, sideband frequencies and the signal-cavity
half width ``fs`` are MHz. Noise powers are linear and relative to shot
noise; ``to_db`` gives ``10*log10``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigurationError, ThresholdError, UnphysicalError
from .trace import Trace


def to_db(value):
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(value)
    return float(out) if np.ndim(out) == 0 else out


def from_db(value_db):
    out = 10.0 ** (np.asarray(value_db, dtype=float) / 10.0)
    return float(out) if np.ndim(out) == 0 else out


BUDGET_KEYS = ("qe", "vis2", "opt", "esc")


@dataclass(frozen=True)
class EfficiencyBudget:
    """Detection efficiency ``qe * vis2 * opt * esc``.

    ``opt_factors`` optionally breaks the optical path into named sub-factors
    (e.g. each grating coupler); their product must equal ``opt``.
    """

    qe: float
    vis2: float
    opt: float | None = None
    esc: float = 1.0
    opt_factors: dict = field(default_factory=dict)

    def __post_init__(self):
        factors = dict(self.opt_factors)
        for name, v in factors.items():
            _check_unit_interval(f"opt_factors[{name}]", v)
        prod = math.prod(factors.values()) if factors else None
        if self.opt is None:
            object.__setattr__(self, "opt", 1.0 if prod is None else prod)
        elif prod is not None and abs(prod - self.opt) > 1e-6 * self.opt:
            raise ConfigurationError(
                f"optical sub-factors multiply to {prod:.6g}, but opt = {self.opt:.6g}")
        for name in BUDGET_KEYS:
            _check_unit_interval(name, getattr(self, name))

    @classmethod
    def from_mapping(cls, values: dict) -> "EfficiencyBudget":
        """Build from ``name -> value``; values may be linear or carry a ``dB`` suffix.

        Names other than the four main factors are optical sub-factors.
        """
        main, sub = {}, {}
        for name, raw in values.items():
            v = parse_efficiency(raw, name)
            (main if name in BUDGET_KEYS else sub)[name] = v
        missing = [k for k in ("qe", "vis2") if k not in main]
        if missing:
            raise ConfigurationError(f"budget is missing {', '.join(missing)}")
        return cls(opt_factors=sub, **main)

    @property
    def external(self) -> float:
        """Everything after the chip facet: ``qe * vis2 * opt``."""
        return self.qe * self.vis2 * self.opt

    @property
    def total(self) -> float:
        return self.external * self.esc

    @property
    def total_db(self) -> float:
        return to_db(self.total)


def parse_efficiency(raw, name="value") -> float:
    if isinstance(raw, (int, float)):
        return float(raw)
    text = str(raw).strip()
    try:
        if text.lower().endswith("db"):
            return from_db(float(text[:-2]))
        return float(text)
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse efficiency {raw!r}") from None


def _check_unit_interval(name, v):
    if not (isinstance(v, (int, float)) and 0.0 < v <= 1.0):
        raise ConfigurationError(f"efficiency {name} = {v!r} must lie in (0, 1]")


def budget_total(budget: EfficiencyBudget) -> float:
    return budget.total


@dataclass(frozen=True)
class SqueezerParams:
    eta: float
    p_th: float
    fs: float
    pump_power: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ConfigurationError(f"efficiency eta = {self.eta} must lie in (0, 1]")
        if not self.p_th > 0:
            raise ConfigurationError("threshold power must be positive")
        if not self.fs > 0:
            raise ConfigurationError("cavity half width fs must be positive")
        if self.pump_power < 0:
            raise ConfigurationError("pump power must be non-negative")

    @classmethod
    def from_ratio(cls, eta: float, ratio: float, fs: float, p_th: float = 1.0):
        """Parameters at pump ratio ``Pp / P_th`` (threshold scale arbitrary)."""
        return cls(eta=eta, p_th=p_th, fs=fs, pump_power=ratio * p_th)

    @property
    def ratio(self) -> float:
        return self.pump_power / self.p_th

    @property
    def x(self) -> float:
        return math.sqrt(self.ratio)


@dataclass(frozen=True)
class NoisePower:
    s_minus: np.ndarray | float
    s_plus: np.ndarray | float

    @property
    def minus_db(self):
        return to_db(self.s_minus)

    @property
    def plus_db(self):
        return to_db(self.s_plus)


def squeezing_terms(eta, x, f, fs):
    """``(S_minus, S_plus)`` of the below-threshold spectrum; no domain checks."""
    u2 = np.square(np.asarray(f, dtype=float) / fs)
    s_minus = 1.0 - eta * 4.0 * x / ((1.0 + x) ** 2 + u2)
    s_plus = 1.0 + eta * 4.0 * x / ((1.0 - x) ** 2 + u2)
    return s_minus, s_plus


def noise_power(params: SqueezerParams, f) -> NoisePower:
    """Squeezed and anti-squeezed noise at sideband frequency ``f`` (MHz)."""
    if params.pump_power >= params.p_th:
        raise ThresholdError(
            f"at/above threshold: Pp = {params.pump_power} mW >= P_th = {params.p_th} mW")
    sm, sp = squeezing_terms(params.eta, params.x, f, params.fs)
    if np.ndim(sm) == 0:
        sm, sp = float(sm), float(sp)
    return NoisePower(sm, sp)


def _x_below(pp, p_th):
    if p_th <= 0:
        raise ConfigurationError("threshold power must be positive")
    if pp < 0:
        raise ConfigurationError("pump power must be non-negative")
    if pp >= p_th:
        raise ThresholdError(f"at/above threshold: Pp = {pp} mW >= P_th = {p_th} mW")
    return math.sqrt(pp / p_th)


def gain_envelopes(pp: float, p_th: float) -> tuple[float, float]:
    """On-resonance amplification and deamplification ``(G_plus, G_minus)``."""
    x = _x_below(pp, p_th)
    return (1.0 - x) ** -2, (1.0 + x) ** -2


def parametric_gain(pp: float, p_th: float, theta=0.0):
    """Seed gain at relative pump phase ``theta``: ``G+ cos^2 + G- sin^2``."""
    gp, gm = gain_envelopes(pp, p_th)
    c2 = np.cos(theta) ** 2
    g = gp * c2 + gm * (1.0 - c2)
    return float(g) if np.ndim(g) == 0 else g


@dataclass(frozen=True)
class ThresholdEstimate:
    p_th: float
    p_th_minus: float | None = None

    @property
    def spread(self) -> float | None:
        """Relative disagreement of the two branch estimates."""
        if self.p_th_minus is None:
            return None
        return abs(self.p_th - self.p_th_minus) / self.p_th


def threshold_from_gain(g_plus: float, pp: float, g_minus: float | None = None) -> ThresholdEstimate:
    """Threshold power from measured amplification (and optionally deamplification)."""
    if not g_plus > 1.0:
        raise ConfigurationError(f"amplification must exceed 1, got {g_plus}")
    if not pp > 0:
        raise ConfigurationError("pump power must be positive")
    x = 1.0 - 1.0 / math.sqrt(g_plus)
    est_minus = None
    if g_minus is not None:
        if not 0.0 < g_minus < 1.0:
            raise ConfigurationError(f"deamplification must lie in (0, 1), got {g_minus}")
        xm = 1.0 / math.sqrt(g_minus) - 1.0
        est_minus = pp / xm ** 2
    return ThresholdEstimate(pp / x ** 2, est_minus)


def propagate_loss(s_in, eta):
    """Noise power after a beam splitter of transmission ``eta``."""
    return eta * s_in + (1.0 - eta)


def infer_onchip(s_meas: float, eta_external: float) -> float:
    """Undo the external loss ``eta_external`` on a measured noise power."""
    if not 0.0 < eta_external <= 1.0:
        raise ConfigurationError("external efficiency must lie in (0, 1]")
    if not s_meas > 1.0 - eta_external:
        raise UnphysicalError(
            f"unphysical measurement for stated efficiency: S = {s_meas:.6g} "
            f"is not above the loss floor 1 - eta = {1.0 - eta_external:.6g}")
    return (s_meas - (1.0 - eta_external)) / eta_external


@dataclass(frozen=True)
class EtaX:
    eta: float
    x: float
    flags: tuple = ()

    @property
    def ratio(self) -> float:
        return self.x ** 2


def infer_eta_x(s_minus: float, s_plus: float, f: float, fs: float) -> EtaX:
    """Solve the squeezing / anti-squeezing pair for ``(eta, x)``.

    The ratio ``R = (S+ - 1)/(1 - S-) = ((1+x)^2 + u^2)/((1-x)^2 + u^2)`` with
    ``u = f/fs`` is a quadratic in ``x``; its root below 1 is exact at any
    ``u``, and ``eta`` follows from either branch.
    """
    if s_plus == 1.0 and s_minus == 1.0:
        return EtaX(math.nan, 0.0, ("eta_unidentifiable",))
    if not s_plus > 1.0 > s_minus:
        raise UnphysicalError(f"need S_plus > 1 > S_minus, got {s_plus}, {s_minus}")
    u2 = (f / fs) ** 2
    r = (s_plus - 1.0) / (1.0 - s_minus)
    if r <= 1.0:
        raise UnphysicalError(
            f"inconsistent pair: anti-squeezing excess/squeezing ratio {r:.6g} <= 1 has no solution")
    disc = (r + 1.0) ** 2 - (r - 1.0) ** 2 * (1.0 + u2)
    if disc < 0:
        raise UnphysicalError("inconsistent pair: no real solution at this sideband frequency")
    # numerically stable small root of (r-1) x^2 - 2(r+1) x + (r-1)(1+u2) = 0
    x = (r - 1.0) * (1.0 + u2) / ((r + 1.0) + math.sqrt(disc))
    if not x < 1.0:
        raise UnphysicalError("inconsistent pair: solution lies at or above threshold")
    eta = (1.0 - s_minus) * ((1.0 + x) ** 2 + u2) / (4.0 * x)
    if eta > 1.0 + 1e-9:
        raise UnphysicalError(f"inconsistent pair: requires efficiency {eta:.6g} > 1")
    return EtaX(float(min(eta, 1.0)), float(x))


def project_threshold_limit(eta: float, f: float = 0.0, fs: float | None = None) -> float:
    """Squeezed noise power as the pump approaches threshold from below."""
    if not 0.0 < eta <= 1.0:
        raise ConfigurationError("efficiency must lie in (0, 1]")
    u2 = 0.0 if f == 0.0 else (f / fs) ** 2
    return 1.0 - eta * 4.0 / (4.0 + u2)


def homodyne_trace(params: SqueezerParams, f: float, lo_scan_rate: float = 0.5,
                   duration: float = 4.0, rbw: float = 1e6, vbw: float = 100.0,
                   seed: int = 0, sample_rate: float | None = None) -> Trace:
    """Zero-span spectrum-analyser trace while the LO phase is swept.

    The ideal noise ``S+ cos^2(theta) + S- sin^2(theta)`` is multiplied by
    ``1 + n(t)``, where ``n`` is white Gaussian noise run through a single-pole
    low-pass at ``vbw`` and scaled to a post-filter relative std of
    ``1/sqrt(rbw/vbw)``. Output is dB relative to shot noise.
    """
    if vbw >= rbw:
        raise ConfigurationError("video bandwidth must be below the resolution bandwidth")
    if duration * lo_scan_rate < 1.0:
        raise ConfigurationError("duration must cover at least one full LO fringe")
    fsamp = 20.0 * vbw if sample_rate is None else float(sample_rate)
    n = int(round(duration * fsamp)) + 1
    t = np.arange(n) / fsamp
    npow = noise_power(params, f)
    theta = 2 * np.pi * lo_scan_rate * t
    ideal = npow.s_plus * np.cos(theta) ** 2 + npow.s_minus * np.sin(theta) ** 2
    sigma = 1.0 / math.sqrt(rbw / vbw)
    a = math.exp(-2 * np.pi * vbw / fsamp)
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(n) * sigma * math.sqrt((1 + a) / (1 - a))
    y0 = rng.standard_normal() * sigma
    fluct, _ = lfilter([1 - a], [1, -a], white, zi=[a * y0])
    meas = ideal * (1.0 + fluct)
    meta = {"sideband_mhz": float(f), "lo_scan_rate_hz": float(lo_scan_rate),
            "rbw_hz": float(rbw), "vbw_hz": float(vbw), "seed": int(seed),
            "s_minus_db": to_db(npow.s_minus), "s_plus_db": to_db(npow.s_plus)}
    return Trace("time_s", t, to_db(meas), "noise_db", meta)


DEFAULT_RIPPLE_RATE = 400.0  # cycles per nm; cosmetic


def gain_trace(buildup: Trace, pp: float, p_th: float,
               ripple_rate: float = DEFAULT_RIPPLE_RATE) -> Trace:
    """Seed gain along a pump scan whose normalised buildup is ``buildup.y``.

    The relative pump/seed phase slips at ``ripple_rate`` cycles per nm, so
    the gain ripples between the local envelopes ``G+(x_loc)`` and ``G-(x_loc)``.
    """
    b = np.asarray(buildup.y, dtype=float)
    if np.any(b < 0):
        raise ConfigurationError("buildup must be non-negative")
    x_loc = np.sqrt(pp * b / p_th)
    if np.any(x_loc >= 1.0):
        raise ThresholdError("above threshold in scan: local pump reaches P_th")
    lam = buildup.x
    phi = 2 * np.pi * ripple_rate * (lam - lam[0])
    gp = (1.0 - x_loc) ** -2
    gm = (1.0 + x_loc) ** -2
    g = gp * np.cos(phi) ** 2 + gm * np.sin(phi) ** 2
    meta = dict(buildup.meta)
    meta.update({"pump_power_mw": float(pp), "p_th_mw": float(p_th),
                 "ripple_rate_per_nm": float(ripple_rate)})
    return Trace(buildup.x_kind, lam, g, "gain_lin", meta)
