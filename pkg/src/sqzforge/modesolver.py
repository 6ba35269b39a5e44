"""Full-vector finite-difference eigenmodes of 2-D waveguide cross-sections.

The transverse magnetic field ``(Hx, Hy)`` is discretised on a staggered
(Yee) grid. With node ``(i, j)`` at ``origin + (i*dx, j*dy)`` the component
sites are::

    Ex, Hy : (i + 1/2, j)        Ez : (i, j)
    Ey, Hx : (i, j + 1/2)        Hz : (i + 1/2, j + 1/2)

and the permittivity map supplies ``exx``, ``eyy`` and ``ezz`` at the E
sites. Fields outside the window are zero. The operator (mu = 1)::

    A = k0^2 [eyy  0 ] + [eyy  0 ] [-Dfy] ezz^-1 [-Dby  Dbx] + [Dbx] [Dfx  Dfy]
             [ 0  exx]   [ 0  exx] [ Dfx]                      [Dby]

satisfies ``A h = beta^2 h`` with ``h = (Hx, Hy)`` and ``n_eff = beta / k0``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, ModeSolverError
from .geometry import Grid2D
from .kvconfig import atomic_write
from .material import PermittivityMap

DENSE_LIMIT = 2000
HYBRID_BAND = 0.05
NODE_THRESHOLD = 0.1


@dataclass(frozen=True)
class ModeLabel:
    polarization: str  # "TE" or "TM"
    order: int
    hybrid: bool = False

    def __str__(self):
        tag = f"{self.polarization}{self.order}"
        return tag + "?" if self.hybrid else tag

    def matches(self, selector) -> bool:
        pol, order = selector
        return self.polarization == pol and self.order == order


@dataclass(eq=False)
class ModeSolution:
    n_eff: float
    wavelength: float
    grid: Grid2D
    hx: np.ndarray
    hy: np.ndarray
    ex: np.ndarray
    ey: np.ndarray
    ez: np.ndarray  # stored as -i * Ez, which is real
    hz: np.ndarray  # stored as -i * Hz, which is real
    te_fraction: float
    horizontal_nodes: int = 0
    vertical_nodes: int = 0
    label: ModeLabel | None = None
    residual: float = float("nan")
    vector: np.ndarray = field(default=None, repr=False)

    @property
    def beta(self) -> float:
        return 2 * math.pi / self.wavelength * self.n_eff


def _diff1(n: int, h: float) -> sp.csr_matrix:
    """Forward difference with a zero field beyond the last node."""
    return sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], format="csr") / h


def derivative_operators(grid: Grid2D):
    """Forward and backward difference matrices ``(Dfx, Dfy, Dbx, Dby)``."""
    fx = _diff1(grid.nx, grid.dx)
    fy = _diff1(grid.ny, grid.dy)
    Dfx = sp.kron(fx, sp.identity(grid.ny), format="csr")
    Dfy = sp.kron(sp.identity(grid.nx), fy, format="csr")
    return Dfx, Dfy, (-Dfx.T).tocsr(), (-Dfy.T).tocsr()


def assemble_operator(pmap: PermittivityMap, grid: Grid2D, wavelength: float) -> sp.csr_matrix:
    """The sparse ``2N x 2N`` transverse-H operator."""
    if pmap.shape != (grid.nx, grid.ny):
        raise ConfigurationError(f"permittivity map shape {pmap.shape} does not match grid "
                                 f"({grid.nx}, {grid.ny})")
    k0 = 2 * math.pi / wavelength
    Dfx, Dfy, Dbx, Dby = derivative_operators(grid)
    eps_yx = sp.diags(np.concatenate([pmap.eyy.ravel(), pmap.exx.ravel()]))
    ezz_inv = sp.diags(1.0 / pmap.ezz.ravel())
    curl_t = sp.hstack([-Dby, Dbx])
    curl = sp.vstack([-Dfy, Dfx])
    grad = sp.vstack([Dbx, Dby])
    div = sp.hstack([Dfx, Dfy])
    op = k0 ** 2 * eps_yx + eps_yx @ curl @ ezz_inv @ curl_t + grad @ div
    return op.tocsr()


def _realify(v: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(v)))
    v = v * (abs(v[k]) / v[k])
    return np.real(v)


def _sign_changes(line: np.ndarray) -> int:
    peak = np.max(np.abs(line))
    if peak == 0:
        return 0
    sig = line[np.abs(line) > NODE_THRESHOLD * peak]
    return int(np.count_nonzero(np.diff(np.sign(sig)) != 0))


def fields_from_h(h: np.ndarray, pmap: PermittivityMap, grid: Grid2D, wavelength: float, beta: float):
    """Derive ``(Ex, Ey, -iEz, -iHz)`` from the transverse magnetic field.

    Units are such that ``eps0 = mu0 = c = 1`` (the wavenumber plays the role
    of the angular frequency).
    """
    n = grid.nx * grid.ny
    hx, hy = h[:n], h[n:]
    k0 = 2 * math.pi / wavelength
    Dfx, Dfy, Dbx, Dby = derivative_operators(grid)
    div_t = Dfx @ hx + Dfy @ hy  # = i beta Hz
    ex = (beta * hy - Dby @ div_t / beta) / (k0 * pmap.exx.ravel())
    ey = (-beta * hx + Dbx @ div_t / beta) / (k0 * pmap.eyy.ravel())
    ez = -(Dbx @ hy - Dby @ hx) / (k0 * pmap.ezz.ravel())  # -i Ez
    hz = -div_t / beta  # -i Hz
    shape = (grid.nx, grid.ny)
    return ex.reshape(shape), ey.reshape(shape), ez.reshape(shape), hz.reshape(shape)


def overlap(a: ModeSolution, b: ModeSolution) -> float:
    """Cross-power ``sum(Ea x Hb) . z dA``."""
    area = a.grid.dx * a.grid.dy
    return float(np.sum(a.ex * b.hy - a.ey * b.hx) * area)


def normalized_overlap(a: ModeSolution, b: ModeSolution) -> float:
    return abs(overlap(a, b)) / math.sqrt(abs(overlap(a, a) * overlap(b, b)))


def classify_mode(mode: ModeSolution, midline_y: float | None = None) -> ModeLabel:
    """TE/TM label and horizontal order of a solved mode.

    The order is the number of sign changes of the dominant transverse E
    component along a horizontal line: the film midline when ``midline_y``
    is given, else the row through the field maximum.
    """
    grid = mode.grid
    te = mode.te_fraction > 0.5
    comp, yoff = (mode.ex, 0.0) if te else (mode.ey, 0.5)
    if midline_y is None:
        row = int(np.unravel_index(np.argmax(np.abs(comp)), comp.shape)[1])
    else:
        ys = grid.origin[1] + (np.arange(grid.ny) + yoff) * grid.dy
        row = int(np.argmin(np.abs(ys - midline_y)))
    order = _sign_changes(comp[:, row])
    hybrid = abs(mode.te_fraction - 0.5) <= HYBRID_BAND
    return ModeLabel("TE" if te else "TM", order, hybrid)


def _vertical_nodes(mode: ModeSolution) -> int:
    comp = mode.ex if mode.te_fraction > 0.5 else mode.ey
    col = int(np.unravel_index(np.argmax(np.abs(comp)), comp.shape)[0])
    return _sign_changes(comp[col, :])


def _eigs(op: sp.csr_matrix, k: int, sigma: float, tol: float, maxiter: int | None):
    size = op.shape[0]
    if size <= DENSE_LIMIT or k >= size - 1:
        vals, vecs = scipy.linalg.eig(op.toarray())
        order = np.argsort(np.abs(vals - sigma))[:k]
        return vals[order], vecs[:, order]
    lu = spla.splu(sp.csc_matrix(op - sigma * sp.identity(size)))
    opinv = spla.LinearOperator(op.shape, matvec=lu.solve, dtype=float)
    try:
        # fixed start vector: ARPACK otherwise seeds from internal state
        v0 = np.random.default_rng(0).standard_normal(size)
        return spla.eigs(op, k=k, sigma=sigma, OPinv=opinv, tol=tol, maxiter=maxiter, v0=v0)
    except spla.ArpackNoConvergence as exc:
        res = None
        if len(exc.eigenvalues):
            v = exc.eigenvectors[:, 0]
            res = float(np.linalg.norm(op @ v - exc.eigenvalues[0] * v) / abs(exc.eigenvalues[0]))
        raise ModeSolverError(
            f"eigensolver did not converge ({len(exc.eigenvalues)} of {k} eigenpairs); "
            f"residual of first converged pair: {res}", residual=res) from exc


def solve_modes(pmap: PermittivityMap, grid: Grid2D, wavelength: float, n_modes: int = 4,
                n_eff_guess: float | None = None, *, guided_only: bool = True,
                n_clad: float | None = None, midline_y: float | None = None,
                tol: float = 1e-13, maxiter: int | None = None) -> list[ModeSolution]:
    """Eigenmodes of ``pmap`` nearest to ``n_eff_guess``, sorted by descending ``n_eff``.

    Parameters
    ----------
    pmap, grid : PermittivityMap, Grid2D
        Cross-section sampled on the staggered grid.
    wavelength : float
        Vacuum wavelength in um.
    n_modes : int
        Number of eigenpairs requested from the shift-and-invert solver.
    n_eff_guess : float, optional
        Shift target; defaults to ``0.98 * n_max``.
    guided_only : bool
        Drop modes with ``n_eff`` outside ``(n_clad, n_max)``. An empty list
        means no guided mode was found near the shift.
    n_clad : float, optional
        Highest cladding/BOX index; defaults to the largest index on the top
        and bottom window rows.
    midline_y : float, optional
        Height of the line used to count horizontal nodes (see
        :func:`classify_mode`).
    """
    if n_modes < 1:
        raise ConfigurationError("n_modes must be at least 1")
    n_lo, n_hi = pmap.n_min, pmap.n_max
    if n_eff_guess is None:
        n_eff_guess = 0.98 * n_hi
    if not n_lo <= n_eff_guess <= n_hi:
        raise ConfigurationError(
            f"n_eff_guess {n_eff_guess} outside material index range [{n_lo:.4f}, {n_hi:.4f}]")
    if n_clad is None:
        edge = np.concatenate([pmap.exx[:, [0, -1]].ravel(), pmap.eyy[:, [0, -1]].ravel(),
                               pmap.ezz[:, [0, -1]].ravel()])
        n_clad = float(np.sqrt(edge.max()))
    k0 = 2 * math.pi / wavelength
    op = assemble_operator(pmap, grid, wavelength)
    k = min(n_modes, op.shape[0] - 1)
    vals, vecs = _eigs(op, k, (k0 * n_eff_guess) ** 2, tol, maxiter)

    area = grid.dx * grid.dy
    modes = []
    for lam, v in zip(vals, vecs.T):
        lam = float(np.real(lam))
        if lam <= 0:
            continue
        h = _realify(v)
        h = h / math.sqrt(np.sum(h * h) * area)
        res = float(np.linalg.norm(op @ h - lam * h) / np.linalg.norm(lam * h))
        beta = math.sqrt(lam)
        n_eff = beta / k0
        if guided_only and not n_clad < n_eff < n_hi:
            continue
        ex, ey, ez, hz = fields_from_h(h, pmap, grid, wavelength, beta)
        # orient so that the forward power is positive
        if np.sum(ex * h[grid.nx * grid.ny:].reshape(ex.shape) - ey * h[:grid.nx * grid.ny].reshape(ex.shape)) < 0:
            h, ex, ey, ez, hz = -h, -ex, -ey, -ez, -hz
        px, py = float(np.sum(ex ** 2)), float(np.sum(ey ** 2))
        shape = (grid.nx, grid.ny)
        mode = ModeSolution(
            n_eff=n_eff, wavelength=wavelength, grid=grid,
            hx=h[:grid.nx * grid.ny].reshape(shape), hy=h[grid.nx * grid.ny:].reshape(shape),
            ex=ex, ey=ey, ez=ez, hz=hz, te_fraction=px / (px + py), residual=res, vector=h)
        mode.label = classify_mode(mode, midline_y)
        mode.horizontal_nodes = mode.label.order
        mode.vertical_nodes = _vertical_nodes(mode)
        modes.append(mode)

    return _sort_modes(modes)


def _sort_modes(modes: list[ModeSolution]) -> list[ModeSolution]:
    modes = sorted(modes, key=lambda m: -m.n_eff)
    # equal n_eff within 1e-9: higher TE fraction first
    i = 0
    while i < len(modes):
        j = i + 1
        while j < len(modes) and modes[j - 1].n_eff - modes[j].n_eff <= 1e-9:
            j += 1
        if j - i > 1:
            modes[i:j] = sorted(modes[i:j], key=lambda m: -m.te_fraction)
        i = j
    return modes


def select_mode(modes: Sequence[ModeSolution], selector) -> ModeSolution | None:
    """First mode matching ``(polarization, order)`` with no vertical node.

    ``selector`` may also be a callable taking the list of modes.
    """
    if callable(selector):
        return selector(modes)
    for m in modes:
        if m.label.matches(selector) and m.vertical_nodes == 0:
            return m
    return None


@dataclass
class ConvergenceStudy:
    h: list[float]
    n_eff: list[float]
    extrapolated: float
    observed_order: float
    monotone: bool
    warning: str | None = None


def richardson(h: Sequence[float], n: Sequence[float], order: float = 2.0) -> float:
    """Richardson extrapolation of the two finest points."""
    ratio = h[-2] / h[-1]
    return n[-1] + (n[-1] - n[-2]) / (ratio ** order - 1)


def refine_convergence(map_builder: Callable[[float], tuple[PermittivityMap, Grid2D]],
                       wavelength: float, selector, h_list: Sequence[float],
                       **solve_kwargs) -> ConvergenceStudy:
    """Solve the selected mode on successively finer grids.

    ``map_builder(h)`` returns ``(pmap, grid)`` for spacing ``h``. The
    extrapolated value assumes second-order convergence; the observed order
    from the last three points is reported alongside.
    """
    h_list = [float(h) for h in h_list]
    if len(h_list) < 3:
        raise ConfigurationError("a convergence study needs at least three spacings")
    if any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ConfigurationError("grid spacings must be strictly decreasing")
    values = []
    for h in h_list:
        pmap, grid = map_builder(h)
        mode = select_mode(solve_modes(pmap, grid, wavelength, **solve_kwargs), selector)
        if mode is None:
            raise ModeSolverError(f"selected mode not found at h = {h}")
        values.append(mode.n_eff)
    steps = np.abs(np.diff(values))
    monotone = bool(np.all(np.diff(steps) < 0)) and bool(
        np.all(np.sign(np.diff(values)) == np.sign(values[-1] - values[-2])))
    if steps[-1] > 0 and steps[-2] > 0:
        p = math.log(steps[-2] / steps[-1]) / math.log(h_list[-2] / h_list[-1])
    else:
        p = float("nan")
    warning = None
    if not monotone:
        warning = "non-monotone convergence"
        warnings.warn(warning, RuntimeWarning, stacklevel=2)
    return ConvergenceStudy(h_list, values, richardson(h_list, values), p, monotone, warning)


def dump_fields_csv(mode: ModeSolution, path) -> None:
    """Write the six field components of ``mode`` to CSV.

    Columns: ``x_um, y_um`` (node coordinates) then real and imaginary parts
    of each component (arbitrary units) at its own staggered site. ``Ez``/``Hz`` are
    in quadrature with the transverse fields, so their real parts are zero.
    """
    grid = mode.grid
    X, Y = np.meshgrid(grid.x, grid.y, indexing="ij")
    cols = [X.ravel(), Y.ravel()]
    names = ["x_um", "y_um"]
    comps = {"ex": mode.ex, "ey": mode.ey, "ez": 1j * mode.ez,
             "hx": mode.hx, "hy": mode.hy, "hz": 1j * mode.hz}
    for name, arr in comps.items():
        arr = np.asarray(arr, dtype=complex).ravel()
        cols += [arr.real, arr.imag]
        names += [f"re_{name}_au", f"im_{name}_au"]
    data = np.column_stack(cols)
    lines = [",".join(names)]
    lines += [",".join(f"{v:.9g}" for v in row) for row in data]
    atomic_write(Path(path), "\n".join(lines) + "\n")
