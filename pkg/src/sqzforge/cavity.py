"""Ring-cavity resonance algebra and the photorefractive scan simulator.

Rates are ordinary frequencies in Hz: ``kappa0`` and ``kappae`` are the
intrinsic and external contributions to the full width at half maximum, so
the loaded quality factor is ``Q = nu0 / (kappa0 + kappae)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, FitError
from .trace import Trace

C_LIGHT = 299792458.0
CRITICAL_TOL = 1e-3
MAX_STEPS = 5_000_000


@dataclass(frozen=True)
class CavityParams:
    wavelength_nm: float
    kappa0: float
    kappae: float

    def __post_init__(self):
        if not (self.kappa0 > 0 and self.kappae > 0):
            raise ConfigurationError("decay rates kappa0 and kappae must be positive")
        if not self.wavelength_nm > 0:
            raise ConfigurationError("resonance wavelength must be positive")

    @classmethod
    def from_q(cls, wavelength_nm: float, q_loaded: float, escape_efficiency: float):
        """Split the loaded linewidth by the escape efficiency ``kappae / kappa``."""
        if not 0 < escape_efficiency < 1:
            raise ConfigurationError("escape efficiency must lie in (0, 1)")
        kappa = q_linewidth(q_loaded, wavelength_nm)[0]
        return cls(wavelength_nm, kappa * (1 - escape_efficiency), kappa * escape_efficiency)

    @property
    def frequency(self) -> float:
        return C_LIGHT / (self.wavelength_nm * 1e-9)

    @property
    def kappa(self) -> float:
        return self.kappa0 + self.kappae

    @property
    def q_loaded(self) -> float:
        return self.frequency / self.kappa

    @property
    def linewidth_nm(self) -> float:
        return self.wavelength_nm / self.q_loaded

    @property
    def regime(self) -> str:
        if abs(self.kappae - self.kappa0) / self.kappa < CRITICAL_TOL:
            return "critical"
        return "over" if self.kappae > self.kappa0 else "under"

    @property
    def escape_efficiency(self) -> float:
        return escape_efficiency(self)

    def swapped(self) -> "CavityParams":
        return replace(self, kappa0=self.kappae, kappae=self.kappa0)


@dataclass(frozen=True)
class PhotorefractiveParams:
    """First-order photorefractive shift of the resonance.

    ``beta`` is the equilibrium blue shift in nm per mW of circulating-power
    proxy ``P_in * buildup_norm * L``, ``tau`` the relaxation time in s.
    """

    beta: float = 0.0
    tau: float = 30.0
    buildup_norm: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError("photorefractive relaxation time must be positive")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative (blue shift)")


def lorentzian_transmission(detuning, params: CavityParams):
    """All-pass transmission ``(d^2 + (k0-ke)^2/4) / (d^2 + (k0+ke)^2/4)``."""
    d2 = np.square(detuning)
    num = d2 + 0.25 * (params.kappa0 - params.kappae) ** 2
    return num / (d2 + 0.25 * params.kappa ** 2)


def q_linewidth(q_loaded: float, wavelength_nm: float) -> tuple[float, float]:
    """FWHM in Hz and in nm of a resonance with loaded quality factor ``q_loaded``."""
    if not q_loaded > 0:
        raise ConfigurationError("Q must be positive")
    nu = C_LIGHT / (wavelength_nm * 1e-9)
    return nu / q_loaded, wavelength_nm / q_loaded


def escape_efficiency(params: CavityParams) -> float:
    return params.kappae / (params.kappa0 + params.kappae)


def _buildup(u, width):
    x = 2.0 * u / width
    return 1.0 / (1.0 + x * x)


def simulate_scan(params: CavityParams, pr: PhotorefractiveParams, scan_speed: float,
                  input_power: float, window: tuple[float, float], direction: int = -1,
                  output: str = "transmission", steps_per_linewidth: int = 20) -> Trace:
    """Transmission (or normalised buildup) seen by a laser swept across the resonance.

    The resonance offset ``D`` (nm) relaxes towards ``-beta * P_circ``::

        dD/dt = -(D + beta * P_in * buildup_norm * L(lambda_laser - lambda0 - D)) / tau

    with ``L`` the peak-normalised Lorentzian buildup. Fixed-step RK4 with
    a step of at most one ``steps_per_linewidth``-th of a linewidth of laser
    travel. ``direction=-1`` sweeps from long to short wavelength, the
    direction in which a blue-shifting resonance is dragged along by the
    laser.
    """
    if not scan_speed > 0:
        raise ConfigurationError("scan speed must be positive")
    if direction not in (-1, 1):
        raise ConfigurationError("direction must be +1 or -1")
    if output not in ("transmission", "buildup"):
        raise ConfigurationError("output must be 'transmission' or 'buildup'")
    lo, hi = sorted(float(w) for w in window)
    lam0 = params.wavelength_nm
    if not lo < lam0 < hi:
        raise ConfigurationError(f"scan window [{lo}, {hi}] nm must contain {lam0} nm")
    width = params.linewidth_nm
    dl = width / steps_per_linewidth
    n_steps = math.ceil((hi - lo) / dl)
    if n_steps > MAX_STEPS:
        raise ConfigurationError(
            f"scan needs {n_steps} RK4 steps (> {MAX_STEPS}); narrow the window or "
            f"reduce steps_per_linewidth")
    dt = (hi - lo) / n_steps / scan_speed
    start = lo if direction > 0 else hi
    vel = direction * scan_speed
    drive = pr.beta * input_power * pr.buildup_norm
    tau = pr.tau

    def rhs(t, d):
        u = start + vel * t - lam0 - d
        x = 2.0 * u / width
        return -(d + drive / (1.0 + x * x)) / tau

    shift = np.empty(n_steps + 1)
    d = 0.0
    shift[0] = d
    if drive != 0.0:
        for k in range(n_steps):
            t = k * dt
            k1 = rhs(t, d)
            k2 = rhs(t + 0.5 * dt, d + 0.5 * dt * k1)
            k3 = rhs(t + 0.5 * dt, d + 0.5 * dt * k2)
            k4 = rhs(t + dt, d + dt * k3)
            d += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            shift[k + 1] = d
    else:
        shift[:] = 0.0
    t = np.arange(n_steps + 1) * dt
    lam = start + vel * t
    u = lam - lam0 - shift
    if output == "buildup":
        y, name = _buildup(u, width), "buildup_frac"
    else:
        delta_hz = C_LIGHT * u * 1e-9 / (lam0 * 1e-9) ** 2
        y, name = lorentzian_transmission(delta_hz, params), "transmission_frac"
    meta = {"scan_speed_nm_per_s": float(scan_speed), "input_power_mw": float(input_power),
            "direction": int(direction), "beta_nm_per_mw": float(pr.beta), "tau_s": float(pr.tau),
            "buildup_norm": float(pr.buildup_norm), "lambda0_nm": float(lam0)}
    return Trace("wavelength_nm", lam, y, name, meta)


def dip_center(trace: Trace) -> float:
    """Resonance centre of a scanned dip: the minimum-transmission sample."""
    return float(trace.x[int(np.argmin(trace.y))])


def dip_widths(trace: Trace) -> tuple[float, float]:
    """Left and right half-depth half-widths (x units) about the minimum."""
    tr = trace.ascending()
    x, y = tr.x, tr.y
    k = int(np.argmin(y))
    base = float(np.max(y))
    half = 0.5 * (base + y[k])

    def crossing(indices):
        prev = k
        for i in indices:
            if y[i] >= half:
                if y[i] == y[prev]:
                    return x[i]
                f = (half - y[prev]) / (y[i] - y[prev])
                return x[prev] + f * (x[i] - x[prev])
            prev = i
        return x[prev]

    left = crossing(range(k - 1, -1, -1))
    right = crossing(range(k + 1, len(x)))
    xc = x[k]
    if 0 < k < len(x) - 1:
        # parabolic vertex through the three samples around the minimum
        y0, y1, y2 = y[k - 1], y[k], y[k + 1]
        den = y0 - 2 * y1 + y2
        if den > 0:
            xc = x[k] + 0.5 * (y0 - y2) / den * (x[k + 1] - x[k])
    return float(xc - left), float(right - xc)


def asymmetry(trace: Trace) -> float:
    """``(right half-width - left half-width) / FWHM`` of the dip."""
    left, right = dip_widths(trace)
    return (right - left) / (right + left)


def lorentzian_trace(params: CavityParams, wavelengths) -> np.ndarray:
    lam = np.asarray(wavelengths, dtype=float)
    delta_hz = C_LIGHT * (lam - params.wavelength_nm) * 1e-9 / (params.wavelength_nm * 1e-9) ** 2
    return lorentzian_transmission(delta_hz, params)


def max_deviation_from_lorentzian(trace: Trace, params: CavityParams) -> float:
    return float(np.max(np.abs(trace.y - lorentzian_trace(params, trace.x))))


@dataclass(frozen=True)
class ShiftRegression:
    powers: tuple
    centers: tuple
    slope: float
    intercept: float
    r2: float


def shift_regression(params: CavityParams, pr: PhotorefractiveParams, scan_speed: float,
                     powers, window_pad: float = 2.0, direction: int = -1) -> ShiftRegression:
    """Dip centre versus input power and its least-squares line (nm/mW)."""
    centers = []
    for p in powers:
        tr = simulate_scan(params, pr, scan_speed, p, scan_window(params, pr, p, window_pad),
                           direction)
        centers.append(dip_center(tr))
    x = np.asarray(powers, dtype=float)
    y = np.asarray(centers)
    slope, intercept = np.polyfit(x, y, 1)
    fit = slope * x + intercept
    ss_res = float(np.sum((y - fit) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ShiftRegression(tuple(x), tuple(y), float(slope), float(intercept), r2)


def scan_window(params: CavityParams, pr: PhotorefractiveParams, power: float,
                pad: float = 2.0) -> tuple[float, float]:
    """Window wide enough for the full photorefractive drag plus ``pad`` nm."""
    reach = pr.beta * power * pr.buildup_norm
    lam0 = params.wavelength_nm
    return lam0 - reach - pad, lam0 + pad


def calibrate_beta(params: CavityParams, pr: PhotorefractiveParams, target_slope: float,
                   scan_speed: float, powers, max_iter: int = 20,
                   rtol: float = 1e-3) -> tuple[PhotorefractiveParams, ShiftRegression]:
    """Scale ``beta`` until the simulated dip-centre slope equals ``target_slope``."""
    if target_slope >= 0:
        raise ConfigurationError("photorefractive shifts are blue: target slope must be negative")
    beta = pr.beta if pr.beta > 0 else -target_slope / pr.buildup_norm
    cur = replace(pr, beta=beta)
    for _ in range(max_iter):
        reg = shift_regression(params, cur, scan_speed, powers)
        if reg.slope >= 0:
            raise FitError("simulated dip centre does not blue-shift; cannot calibrate beta")
        if abs(reg.slope / target_slope - 1) < rtol:
            return cur, reg
        cur = replace(cur, beta=cur.beta * target_slope / reg.slope)
    raise FitError(f"beta calibration did not close within {max_iter} iterations "
                   f"(slope {reg.slope:.4g} vs target {target_slope:.4g})")


@dataclass(frozen=True)
class ResonanceFit:
    cavity: CavityParams
    photorefractive: PhotorefractiveParams | None
    stderr: dict
    result: "object"

    @property
    def regime(self) -> str:
        return self.cavity.regime


def _dip_start(trace: Trace, regime: str) -> tuple[float, float, float]:
    """Initial ``(lambda_min, kappa0_ghz, kappae_ghz)`` from the dip shape."""
    from .fit import C_NM_GHZ

    tr = trace.ascending()
    depth = float(np.max(tr.y) - np.min(tr.y))
    lam_min = dip_center(tr)
    left, right = dip_widths(tr)
    t_min = float(np.min(tr.y))
    if depth < 1e-3 or not (tr.x[0] < lam_min - left and lam_min + right < tr.x[-1]):
        raise FitError("no resonance dip found in trace",
                       float(np.linalg.norm(tr.y - np.mean(tr.y))))
    kappa = C_NM_GHZ * (left + right) / lam_min ** 2
    d = min(max(1.0 - t_min, 1e-6), 1.0)
    if regime == "critical" or d >= 1.0:
        r = 1.0
    else:
        root = 2.0 * math.sqrt(1.0 - d)
        r = ((2.0 - d) + root) / d if regime == "over" else ((2.0 - d) - root) / d
    return lam_min, kappa / (1.0 + r), kappa * r / (1.0 + r)


def scan_setting(value, meta: dict, key: str) -> float:
    if value is None:
        if key not in meta:
            raise ConfigurationError(f"sharkfin fit needs {key} (argument or trace metadata)")
        value = meta[key]
    try:
        return float(value)
    except ValueError:
        raise ConfigurationError(f"{key}: expected a number, got {value!r}") from None


def fit_resonance(trace: Trace, model: str = "lorentzian", regime: str = "over", *,
                  sigma=None, cavity: CavityParams | None = None,
                  photorefractive: PhotorefractiveParams | None = None,
                  scan_speed: float | None = None, input_power: float | None = None,
                  direction: int = -1) -> ResonanceFit:
    """Fit a scanned dip.

    ``lorentzian`` fits centre, ``kappa0`` and ``kappae``. The transmission is
    symmetric under ``kappa0 <-> kappae``, so ``regime`` ("over", "under" or
    "critical") picks the branch. ``sharkfin`` fits the resonance centre and
    ``beta`` with the linewidths of ``cavity`` and the ``tau`` and
    ``buildup_norm`` of ``photorefractive`` held fixed; ``scan_speed`` and
    ``input_power`` default to the trace metadata.
    """
    from .fit import FitProblem, Model, least_squares, lorentzian_model

    if regime not in ("over", "under", "critical"):
        raise ConfigurationError("regime hint must be 'over', 'under' or 'critical'")
    tr = trace.ascending()
    if tr.x_kind != "wavelength_nm":
        raise ConfigurationError("resonance fits need a wavelength_nm trace")
    if model == "lorentzian":
        lam_min, k0, ke = _dip_start(tr, regime)
        res = least_squares(FitProblem(lorentzian_model(lam_min), tr.x, tr.y, [0.0, k0, ke],
                                       sigma=sigma))
        _require(res)
        off, k0, ke = res.params
        err = res.stderr
        if (regime == "over" and k0 > ke) or (regime == "under" and ke > k0):
            k0, ke = ke, k0
            err = err[[0, 2, 1]]
        fitted = CavityParams(float(lam_min + off), float(k0) * 1e9, float(ke) * 1e9)
        stderr = {"wavelength_nm": float(err[0]), "kappa0": float(err[1]) * 1e9,
                  "kappae": float(err[2]) * 1e9}
        return ResonanceFit(fitted, None, stderr, res)
    if model != "sharkfin":
        raise ConfigurationError(f"unknown resonance model {model!r}")
    if cavity is None or photorefractive is None:
        raise ConfigurationError("sharkfin fits need the cavity linewidths and tau")
    speed = scan_setting(scan_speed, tr.meta, "scan_speed_nm_per_s")
    power = scan_setting(input_power, tr.meta, "input_power_mw")
    lam_min = dip_center(tr)
    left, right = dip_widths(tr)
    w = cavity.linewidth_nm
    pr = photorefractive
    if direction < 0:
        lam0 = lam_min + right - 0.5 * w
        beta0 = (lam0 - lam_min + speed * pr.tau) / (power * pr.buildup_norm)
    else:
        lam0 = lam_min - left + 0.5 * w
        beta0 = abs(lam0 - lam_min) / (power * pr.buildup_norm)
    lo, hi = float(tr.x[0]), float(tr.x[-1])
    ref = lam0

    def fn(p, x):
        cav = replace(cavity, wavelength_nm=ref + p[0])
        sim = simulate_scan(cav, replace(pr, beta=max(p[1], 0.0)), speed, power, (lo, hi),
                            direction).ascending()
        return np.interp(x, sim.x, sim.y)

    span = 0.5 * (hi - lo)
    m = Model("sharkfin", ("offset", "beta"), fn, None,
              lower=(lo - ref + 1e-9 * span, 0.0), upper=(hi - ref - 1e-9 * span, np.inf))
    res = least_squares(FitProblem(m, tr.x, tr.y, [0.0, max(beta0, 0.0)], sigma=sigma))
    _require(res)
    fitted = replace(cavity, wavelength_nm=float(ref + res.params[0]))
    stderr = {"wavelength_nm": float(res.stderr[0]), "beta": float(res.stderr[1])}
    return ResonanceFit(fitted, replace(pr, beta=float(res.params[1])), stderr, res)


def _require(res):
    if not res.converged:
        raise FitError(f"resonance fit did not converge ({res.reason}); final residual norm "
                       f"{res.residual_norm:.4g}", res.residual_norm)
