"""Damped nonlinear least squares and the squeezing / lineshape fit models.

The engine is Levenberg-Marquardt with Marquardt diagonal scaling, a
gain-ratio damping update and projection onto box bounds after each trial
step. Only free parameters are varied; fixed ones keep their initial value
and get zero variance.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, FitError
from .opo import infer_eta_x, squeezing_terms
from .errors import UnphysicalError

SCHEMA = "sqzforge.fitresult/1"
C_NM_GHZ = 299792458.0  # speed of light in nm * GHz

_observers: list[Callable] = []


def add_observer(fn: Callable) -> None:
    """Register ``fn(result)``, called after every :func:`least_squares` run."""
    _observers.append(fn)


def remove_observer(fn: Callable) -> None:
    if fn in _observers:
        _observers.remove(fn)


@dataclass(frozen=True)
class Model:
    """``fn(p, x) -> y`` with optional analytic ``jac(p, x) -> (N, P)``."""

    name: str
    param_names: tuple
    fn: Callable
    jac: Callable | None = None
    lower: tuple | None = None
    upper: tuple | None = None

    def __call__(self, p, x):
        return self.fn(np.asarray(p, dtype=float), x)

    @property
    def n_params(self) -> int:
        return len(self.param_names)


@dataclass
class FitProblem:
    model: Model
    x: np.ndarray
    y: np.ndarray
    p0: Sequence[float]
    sigma: np.ndarray | float | None = None
    bounds: tuple | None = None
    fixed: Sequence[str] = ()
    numeric_jacobian: bool = False
    absolute_sigma: bool = False

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.p0 = np.asarray(self.p0, dtype=float)
        n = len(self.y)
        if self.y.ndim != 1 or len(self.x) != n:
            raise ConfigurationError("fit data x and y must have the same length")
        if len(self.p0) != self.model.n_params:
            raise ConfigurationError(
                f"{self.model.name}: expected {self.model.n_params} initial values, got {len(self.p0)}")
        sig = np.ones(n) if self.sigma is None else np.broadcast_to(
            np.asarray(self.sigma, dtype=float), (n,)).copy()
        if np.any(~(sig > 0)):
            raise ConfigurationError("sigma must be positive")
        self.sigma = sig
        lo, hi = self.bounds if self.bounds is not None else (
            self.model.lower or (-np.inf,) * self.model.n_params,
            self.model.upper or (np.inf,) * self.model.n_params)
        self.bounds = (np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
        if np.any(self.p0 < self.bounds[0]) or np.any(self.p0 > self.bounds[1]):
            raise ConfigurationError(f"initial parameters {self.p0.tolist()} lie outside the bounds")
        unknown = set(self.fixed) - set(self.model.param_names)
        if unknown:
            raise ConfigurationError(f"cannot fix unknown parameter(s) {sorted(unknown)}")
        if n < len(self.free_index):
            raise ConfigurationError(
                f"{n} data points cannot determine {len(self.free_index)} free parameters")

    @property
    def free_index(self) -> np.ndarray:
        return np.array([i for i, name in enumerate(self.model.param_names)
                         if name not in self.fixed], dtype=int)


@dataclass
class FitResult:
    model: str
    names: tuple
    params: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    iterations: int
    nfev: int
    converged: bool
    reason: str
    fixed: tuple = ()
    cost_history: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    n_points: int = 0

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def cost(self) -> float:
        return 0.5 * self.residual_norm ** 2

    @property
    def dof(self) -> int:
        return self.n_points - (len(self.names) - len(self.fixed))

    def __getitem__(self, name: str) -> float:
        return float(self.params[self.names.index(name)])

    def error(self, name: str) -> float:
        return float(self.stderr[self.names.index(name)])

    def as_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "model": self.model,
            "param_order": list(self.names),
            "params": {n: _jsonable(v) for n, v in zip(self.names, self.params)},
            "stderr": {n: _jsonable(v) for n, v in zip(self.names, self.stderr)},
            "covariance": [[_jsonable(v) for v in row] for row in self.covariance],
            "fixed": list(self.fixed),
            "residual_norm": _jsonable(self.residual_norm),
            "iterations": self.iterations,
            "nfev": self.nfev,
            "converged": self.converged,
            "reason": self.reason,
            "flags": list(self.flags),
            "n_points": self.n_points,
            "dof": self.dof,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


def _jsonable(v):
    v = float(v)
    return v if math.isfinite(v) else None


def numeric_jacobian(model, params, x, h_rel: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian with step ``h_rel * max(|p_j|, 1)``."""
    fn = model.fn if isinstance(model, Model) else model
    p = np.asarray(params, dtype=float)
    cols = []
    for j in range(len(p)):
        h = h_rel * max(abs(p[j]), 1.0)
        pp, pm = p.copy(), p.copy()
        pp[j] += h
        pm[j] -= h
        yp, ym = np.asarray(fn(pp, x), dtype=float), np.asarray(fn(pm, x), dtype=float)
        if not (np.all(np.isfinite(yp)) and np.all(np.isfinite(ym))):
            raise ConfigurationError(f"model is not finite when perturbing parameter {j} of {p.tolist()}")
        cols.append((yp - ym) / (2 * h))
    return np.column_stack(cols) if cols else np.zeros((len(np.atleast_1d(fn(p, x))), 0))


def least_squares(problem: FitProblem, gtol: float = 1e-10, xtol: float = 1e-12,
                  max_iter: int = 500) -> FitResult:
    """Minimise ``0.5 * sum(((model(p, x) - y) / sigma)^2)``.

    Stops on a scaled gradient ``max_j |g_j| / (|J_j| |r|) < gtol``, a
    relative step below ``xtol`` or after ``max_iter`` trial steps. If the
    damping saturates first, the result is returned with ``converged=False``.

    Steps are judged on ``0.5 * (r_new - r) . (r_new + r)`` rather than on a
    difference of two sums of squares, so decreases far below ``eps * cost``
    are still resolved near the optimum.
    """
    model = problem.model
    free = problem.free_index
    lo, hi = problem.bounds[0][free], problem.bounds[1][free]
    w = 1.0 / problem.sigma
    p_full = problem.p0.copy()
    nfev = 0

    def residual(pf):
        nonlocal nfev
        q = p_full.copy()
        q[free] = pf
        nfev += 1
        return (np.asarray(model(q, problem.x), dtype=float) - problem.y) * w

    def jacobian(pf):
        q = p_full.copy()
        q[free] = pf
        if model.jac is None or problem.numeric_jacobian:
            jac = numeric_jacobian(model, q, problem.x)
        else:
            jac = np.asarray(model.jac(q, problem.x), dtype=float)
        return jac[:, free] * w[:, None]

    p = p_full[free].copy()
    r = residual(p)
    if not np.all(np.isfinite(r)):
        raise ConfigurationError(f"model output is not finite at parameters {p_full.tolist()}")
    cost = 0.5 * float(r @ r)
    history = [cost]
    n_free = len(p)
    reason, converged, it = "max_iter", False, 0

    if n_free == 0:
        reason, converged = "no_free_parameters", True
        J = np.zeros((len(r), 0))
    else:
        J = jacobian(p)
        A = J.T @ J
        g = J.T @ r
        dscale = np.maximum(np.diag(A), 1e-300)
        lam = 1e-9 * float(np.max(dscale))
        nu = 2.0
        while it < max_iter:
            col = np.sqrt(np.diag(A))
            rn = float(np.linalg.norm(r))
            if rn == 0.0 or np.max(np.abs(g) / np.where(col > 0, col * rn, 1.0)) < gtol:
                reason, converged = "gtol", True
                break
            it += 1
            try:
                step = np.linalg.solve(A + lam * np.diag(dscale), -g)
            except np.linalg.LinAlgError:
                step = None
            drop, pred = -math.inf, 0.0
            if step is not None and np.all(np.isfinite(step)):
                p_new = np.clip(p + step, lo, hi)
                step = p_new - p
                if np.all(np.abs(step) <= xtol * (np.abs(p) + xtol)):
                    reason, converged = "xtol", True
                    break
                r_new = residual(p_new)
                if np.all(np.isfinite(r_new)):
                    drop = -0.5 * float((r_new - r) @ (r_new + r))
                pred = -(g @ step) - 0.5 * float(step @ A @ step)
            if drop > 0.0:
                rho = drop / pred if pred > 0 else 0.0
                p, r, cost = p_new, r_new, max(cost - drop, 0.0)
                history.append(cost)
                J = jacobian(p)
                A = J.T @ J
                g = J.T @ r
                dscale = np.maximum(dscale, np.diag(A))
                lam *= max(0.1, 1.0 - (2.0 * rho - 1.0) ** 3) if rho > 0 else 1.0
                nu = 2.0
            else:
                lam *= nu
                nu *= 2.0
                if lam > 1e30 * float(np.max(dscale)):
                    reason = "damping_saturated"
                    break
    p_full[free] = p
    cov = np.zeros((model.n_params, model.n_params))
    flags = []
    if n_free:
        A = J.T @ J
        s2 = 1.0 if problem.absolute_sigma else float(r @ r) / max(len(r) - n_free, 1)
        if np.linalg.cond(A) > 1e14:
            flags.append("singular_covariance")
        cov_free = np.linalg.pinv(A, rcond=1e-14, hermitian=True) * s2
        cov[np.ix_(free, free)] = 0.5 * (cov_free + cov_free.T)
    result = FitResult(model.name, tuple(model.param_names), p_full, cov, float(np.linalg.norm(r)),
                       it, nfev, converged, reason, tuple(problem.fixed), history, flags, len(r))
    for obs in list(_observers):
        obs(result)
    return result


# -- models -----------------------------------------------------------------

def linear_model() -> Model:
    return Model("linear", ("slope", "intercept"),
                 lambda p, x: p[0] * x + p[1],
                 lambda p, x: np.column_stack([x, np.ones_like(x)]))


def _squeeze_core(eta, u, fs, f, s):
    """``S = 1 + s*eta*4u/D`` with ``D = (1 - s*u)^2 + (f/fs)^2`` and its partials."""
    q = (f / fs) ** 2
    D = (1.0 - s * u) ** 2 + q
    S = 1.0 + s * eta * 4.0 * u / D
    dS_deta = s * 4.0 * u / D
    dD_du = -2.0 * s * (1.0 - s * u)
    dS_du = s * eta * 4.0 * (D - u * dD_du) / D ** 2
    dD_dfs = -2.0 * q / fs
    dS_dfs = -s * eta * 4.0 * u * dD_dfs / D ** 2
    return S, dS_deta, dS_du, dS_dfs


def squeeze_power_model() -> Model:
    """Noise power vs pump power; ``x`` columns are ``(Pp_mw, branch, f_mhz)``.

    ``branch`` is -1 for the squeezed and +1 for the anti-squeezed quadrature.
    Parameters: ``eta``, ``p_th`` (mW), ``fs`` (MHz).
    """
    def fn(p, x):
        u = np.sqrt(x[:, 0] / p[1])
        return _squeeze_core(p[0], u, p[2], x[:, 2], x[:, 1])[0]

    def jac(p, x):
        u = np.sqrt(x[:, 0] / p[1])
        _, de, du, dfs = _squeeze_core(p[0], u, p[2], x[:, 2], x[:, 1])
        return np.column_stack([de, du * (-0.5 * u / p[1]), dfs])

    return Model("squeeze_power", ("eta", "p_th", "fs"), fn, jac,
                 lower=(1e-9, 1e-9, 1e-6), upper=(1.0, 1e9, 1e7))


def squeeze_frequency_model() -> Model:
    """Noise power vs sideband frequency; ``x`` columns are ``(f_mhz, branch)``.

    Parameters: ``eta``, ``ratio`` (= Pp/P_th), ``fs`` (MHz).
    """
    def fn(p, x):
        return _squeeze_core(p[0], math.sqrt(p[1]), p[2], x[:, 0], x[:, 1])[0]

    def jac(p, x):
        u = math.sqrt(p[1])
        _, de, du, dfs = _squeeze_core(p[0], u, p[2], x[:, 0], x[:, 1])
        return np.column_stack([de, du * 0.5 / u, dfs])

    return Model("squeeze_frequency", ("eta", "ratio", "fs"), fn, jac,
                 lower=(1e-9, 1e-12, 1e-6), upper=(1.0, 1.0 - 1e-9, 1e7))


def lorentzian_model(lambda_ref: float) -> Model:
    """All-pass dip vs wavelength (nm).

    Parameters: ``offset`` of the centre from ``lambda_ref`` (nm), and the
    intrinsic / external linewidth contributions ``kappa0``, ``kappae`` (GHz).
    """
    def parts(p, x):
        lam0 = lambda_ref + p[0]
        d = C_NM_GHZ * (1.0 / x - 1.0 / lam0)
        a, b = 0.5 * (p[1] - p[2]), 0.5 * (p[1] + p[2])
        den = d * d + b * b
        return lam0, d, a, b, den

    def fn(p, x):
        _, d, a, b, den = parts(p, x)
        return (d * d + a * a) / den

    def jac(p, x):
        lam0, d, a, b, den = parts(p, x)
        dT_dd = 2.0 * d * (b * b - a * a) / den ** 2
        dT_da = 2.0 * a / den
        dT_db = -2.0 * b * (d * d + a * a) / den ** 2
        dd_dl = C_NM_GHZ / lam0 ** 2
        return np.column_stack([dT_dd * dd_dl, 0.5 * (dT_da + dT_db), 0.5 * (-dT_da + dT_db)])

    return Model("lorentzian", ("offset", "kappa0", "kappae"), fn, jac,
                 lower=(-np.inf, 1e-9, 1e-9), upper=(np.inf, np.inf, np.inf))


def in_db(model: Model) -> Model:
    """The same model with output ``10*log10(y)``."""
    k = 10.0 / math.log(10.0)

    def fn(p, x):
        return k * np.log(model.fn(p, x))

    jac = None
    if model.jac is not None:
        def jac(p, x):
            return k * model.jac(p, x) / model.fn(p, x)[:, None]

    return Model(model.name + "_db", model.param_names, fn, jac, model.lower, model.upper)


# Registry used by the gradient check: factory plus a sampler of
# (params, x) points inside the model's bounds.
def _sample_squeeze_power(rng):
    p = np.array([rng.uniform(0.05, 1.0), rng.uniform(20, 400), rng.uniform(50, 800)])
    pp = rng.uniform(0.1, 0.9 * p[1], 12)
    x = np.column_stack([pp, np.tile([-1.0, 1.0], 6), rng.uniform(0, 600, 12)])
    return p, x


def _sample_squeeze_frequency(rng):
    p = np.array([rng.uniform(0.05, 1.0), rng.uniform(0.005, 0.8), rng.uniform(50, 800)])
    x = np.column_stack([rng.uniform(0, 1000, 12), np.tile([-1.0, 1.0], 6)])
    return p, x


def _sample_lorentzian(rng):
    p = np.array([rng.uniform(-0.02, 0.02), rng.uniform(0.3, 5.0), rng.uniform(0.3, 5.0)])
    x = 775.0 + rng.uniform(-0.05, 0.05, 15)
    return p, x


def _sample_linear(rng):
    return rng.uniform(-3, 3, 2), rng.uniform(-10, 10, 8)


MODELS = {
    "linear": (linear_model, _sample_linear),
    "squeeze_power": (squeeze_power_model, _sample_squeeze_power),
    "squeeze_frequency": (squeeze_frequency_model, _sample_squeeze_frequency),
    "lorentzian": (lambda: lorentzian_model(775.0), _sample_lorentzian),
}


# -- squeezing fits ---------------------------------------------------------

def _branches(var, s_minus, s_plus):
    var = np.asarray(var, dtype=float)
    cols, ys = [], []
    for s, data in ((-1.0, s_minus), (1.0, s_plus)):
        if data is None:
            continue
        data = np.asarray(data, dtype=float)
        if data.shape != var.shape:
            raise ConfigurationError("each branch needs one value per abscissa point")
        cols.append(np.column_stack([var, np.full_like(var, s)]))
        ys.append(data)
    if not ys:
        raise ConfigurationError("no squeezing data given")
    return np.vstack(cols), np.concatenate(ys), len(ys) == 1


def _degenerate(model: Model, p, n, fixed):
    res = FitResult(model.name, model.param_names, np.asarray(p, dtype=float),
                    np.full((model.n_params, model.n_params), np.nan), 0.0, 0, 0, True,
                    "degenerate_data", tuple(fixed), [0.0], ["eta_unidentifiable"], n)
    return res


def _warm_pair(s_minus, s_plus, idx, f, fs):
    try:
        return infer_eta_x(float(s_minus[idx]), float(s_plus[idx]), f, fs)
    except UnphysicalError:
        return None


def fit_squeezing_vs_power(pp, s_minus=None, s_plus=None, *, f: float, fs: float,
                           fit_fs: bool = False, domain: str = "linear", sigma=None,
                           p0=None) -> FitResult:
    """Joint fit of both quadratures vs pump power for ``(eta, p_th)``.

    ``fs`` is held at the given value unless ``fit_fs``. Values are linear
    noise powers relative to shot noise.
    """
    pp = np.asarray(pp, dtype=float)
    xs, y, single = _branches(pp, s_minus, s_plus)
    x = np.column_stack([xs, np.full(len(y), float(f))])
    model = squeeze_power_model()
    fixed = () if fit_fs else ("fs",)
    flags = []
    if single:
        warnings.warn("single-branch squeezing data: eta and P_th are weakly identifiable",
                      stacklevel=2)
        flags.append("single_branch")
    if np.max(np.abs(y - 1.0)) < 1e-12:
        return _degenerate(model, (math.nan, math.inf, fs), len(y), fixed)
    if p0 is None:
        p0 = _power_warm_start(pp, s_minus, s_plus, f, fs)
    lower = (1e-9, float(np.max(pp)) * (1 + 1e-6), 1e-6)
    p0 = np.array(p0, dtype=float)
    p0[1] = max(p0[1], lower[1] * 1.01)
    res = _run(model, x, y, p0, sigma, (lower, model.upper), fixed, domain)
    res.flags = flags + res.flags
    if "singular_covariance" in res.flags:
        res.flags.append("eta_unidentifiable")
    return res


def _power_warm_start(pp, s_minus, s_plus, f, fs):
    order = np.argsort(pp)[::-1]
    if s_minus is not None and s_plus is not None:
        for i in order:
            if pp[i] <= 0:
                continue
            est = _warm_pair(s_minus, s_plus, i, f, fs)
            if est is not None and est.x > 0:
                return (min(max(est.eta, 1e-3), 1.0), pp[i] / est.x ** 2, fs)
    # one branch: assume eta = 0.5 and solve the squeezed-branch size for x
    i = order[0]
    dev = abs((s_minus if s_minus is not None else s_plus)[i] - 1.0)
    x = min(max(dev / 2.0, 1e-3), 0.9)
    return (0.5, max(pp[i], 1e-6) / x ** 2, fs)


def fit_squeezing_vs_frequency(f, s_minus=None, s_plus=None, *, fix: dict | None = None,
                               domain: str = "linear", sigma=None, p0=None) -> FitResult:
    """Joint fit of both quadratures vs sideband frequency for ``(eta, ratio, fs)``.

    ``fix`` maps parameter names to held values, e.g. ``{"fs": 310.0}``.
    """
    f = np.asarray(f, dtype=float)
    x, y, single = _branches(f, s_minus, s_plus)
    model = squeeze_frequency_model()
    fix = dict(fix or {})
    unknown = set(fix) - set(model.param_names)
    if unknown:
        raise ConfigurationError(f"cannot fix unknown parameter(s) {sorted(unknown)}")
    flags = []
    if single:
        warnings.warn("single-branch squeezing data: parameters are weakly identifiable",
                      stacklevel=2)
        flags.append("single_branch")
    if np.max(np.abs(y - 1.0)) < 1e-12:
        return _degenerate(model, (math.nan, 0.0, fix.get("fs", math.nan)), len(y), tuple(fix))
    start = np.array(p0 if p0 is not None else _frequency_warm_start(f, s_minus, s_plus),
                     dtype=float)
    for name, v in fix.items():
        start[model.param_names.index(name)] = v
    lo = np.array(model.lower)
    hi = np.array(model.upper)
    start = np.clip(start, lo, hi)
    res = _run(model, x, y, start, sigma, (lo, hi), tuple(fix), domain)
    res.flags = flags + res.flags
    if "fs" not in fix and np.max(f) < 0.3 * res["fs"]:
        res.flags.append("fs_lower_bound_only")
    if "singular_covariance" in res.flags:
        res.flags.append("eta_unidentifiable")
    return res


def _frequency_warm_start(f, s_minus, s_plus):
    lo_i, hi_i = int(np.argmin(f)), int(np.argmax(f))
    if s_minus is None or s_plus is None:
        dev = abs((s_minus if s_minus is not None else s_plus)[lo_i] - 1.0)
        x = min(max(dev / 2.0, 1e-3), 0.9)
        return (0.5, x * x, max(float(np.max(f)), 1.0))
    # fs-independent first pass at the lowest frequency, then fs from the highest
    est = _warm_pair(s_minus, s_plus, lo_i, 0.0, 1.0)
    if est is None or est.x <= 0:
        return (0.5, 0.01, max(float(np.max(f)), 1.0))
    eta, xv = est.eta, est.x
    fmax = float(f[hi_i])
    fs0 = 10.0 * max(fmax, 1.0)
    drop = 1.0 - s_minus[hi_i]
    if drop > 0 and fmax > 0:
        u2 = eta * 4.0 * xv / drop - (1.0 + xv) ** 2
        if u2 > 0:
            fs0 = fmax / math.sqrt(u2)
    if f[lo_i] > 0:
        refined = _warm_pair(s_minus, s_plus, lo_i, float(f[lo_i]), fs0)
        if refined is not None and refined.x > 0:
            eta, xv = refined.eta, refined.x
    return (min(max(eta, 1e-3), 1.0), min(max(xv * xv, 1e-9), 0.99), fs0)


def _run(model, x, y, p0, sigma, bounds, fixed, domain):
    if domain == "db":
        model = in_db(model)
        y = 10.0 * np.log10(y)
    elif domain != "linear":
        raise ConfigurationError("domain must be 'linear' or 'db'")
    prob = FitProblem(model, x, y, p0, sigma=sigma, bounds=bounds, fixed=fixed)
    return least_squares(prob)


def require_converged(result: FitResult) -> FitResult:
    if not result.converged:
        raise FitError(f"{result.model} fit did not converge ({result.reason}); "
                       f"residual norm {result.residual_norm:.4g}", result.residual_norm)
    return result


def model_curve(result: FitResult, x) -> np.ndarray:
    """Evaluate the fitted squeezing model on ``x`` (same column layout as the fit)."""
    factory = {"squeeze_power": squeeze_power_model,
               "squeeze_frequency": squeeze_frequency_model}.get(result.model.removesuffix("_db"))
    if factory is None:
        raise ConfigurationError(f"no curve evaluator for model {result.model}")
    return factory()(result.params, np.asarray(x, dtype=float))
