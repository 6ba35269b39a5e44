"""Command-line front end: ``sqzforge <command> [<subcommand>] [flags]``.

Commands write plot-ready CSV/JSON into ``--out`` (atomically) and print a
short report unless ``--quiet``. Exit codes: 0 success, 1 numerical or
convergence failure, 2 invalid input.

A run configuration is a strict key/value file; flags override it::

    [run]
    out = results
    seed = 0
    jobs = 1

    [stack]
    etch_depth = 0.40

    [modes]
    widths = 0.8:1.3:0.05
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import cavity as cav
from . import fit as fitmod
from . import kvconfig, opo
from .errors import (ConfigurationError, FitError, ModeSolverError, ThresholdError,
                     UnphysicalError, WavelengthRangeError)
from .geometry import DEFAULT_SIDEWALL, LayerStack, stack_from_section
from .trace import SchemaError, Trace, read_table, write_table

EXIT_OK, EXIT_NUMERIC, EXIT_INVALID = 0, 1, 2

SECTIONS = {
    "run": ("out", "seed", "jobs", "quiet", "materials"),
    "stack": None,  # validated by geometry
    "modes": ("widths", "h", "margin", "sidewall_angle", "signal_wavelength", "pump_wavelength",
              "signal_mode", "pump_mode", "dump_fields"),
    "cavity": ("wavelength_nm", "q_loaded", "escape", "beta", "tau", "buildup_norm",
               "calibrate_slope", "powers", "power_speed", "speeds", "speed_power",
               "window_pad", "max_points"),
    "squeezer": ("eta", "ratio", "pump_power", "p_th", "fs"),
    "budget": None,  # free component names
    "homodyne": ("f", "lo_scan_rate", "duration", "rbw", "vbw"),
    "fit": ("data", "f", "fs", "fit_fs", "domain", "regime", "fix"),
}


@dataclass
class RunConfig:
    """Parsed configuration; unknown sections and keys are rejected."""

    sections: dict = field(default_factory=dict)
    out: Path = Path("sqzforge-out")
    seed: int = 0
    jobs: int = field(default_factory=lambda: os.cpu_count() or 1)
    quiet: bool = False
    materials: Path | None = None
    source: str = "<defaults>"

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        sections = kvconfig.load(path)
        cfg = cls.from_sections(sections, source=str(path), base=path.parent)
        return cfg

    @classmethod
    def from_sections(cls, sections: dict, source: str = "<string>", base: Path = Path(".")):
        unknown = set(sections) - set(SECTIONS)
        if unknown:
            raise ConfigurationError(f"{source}: unknown section(s) {', '.join(sorted(unknown))}")
        for name, body in sections.items():
            if SECTIONS[name] is not None:
                kvconfig.check_keys(name, body, SECTIONS[name])
        cfg = cls(sections=sections, source=source)
        run = sections.get("run", {})
        if "out" in run:
            cfg.out = base / run["out"]
        if "seed" in run:
            cfg.seed = parse_seed(run["seed"])
        if "jobs" in run:
            cfg.jobs = parse_jobs(run["jobs"])
        if "quiet" in run:
            cfg.quiet = kvconfig.as_bool("run", "quiet", run["quiet"])
        if "materials" in run:
            cfg.materials = base / run["materials"]
            if not cfg.materials.is_file():
                raise ConfigurationError(f"materials file not found: {cfg.materials}")
        if "stack" in sections:
            stack_from_section(sections["stack"])
        return cfg

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)


def parse_seed(text) -> int:
    try:
        seed = int(str(text).strip(), 0)
    except ValueError:
        raise ConfigurationError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= seed < 2 ** 64:
        raise ConfigurationError("seed must be an unsigned 64-bit value")
    return seed


def parse_jobs(text) -> int:
    try:
        jobs = int(str(text).strip())
    except ValueError:
        raise ConfigurationError(f"jobs must be an integer, got {text!r}") from None
    if jobs < 0:
        raise ConfigurationError("jobs must be >= 0 (0 = available parallelism)")
    return jobs or (os.cpu_count() or 1)


def parse_range(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigurationError(f"range must be start:stop:step, got {text!r}")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError:
            raise ConfigurationError(f"range must be numeric, got {text!r}") from None
        if step <= 0 or stop < start:
            raise ConfigurationError(f"range needs step > 0 and stop >= start, got {text!r}")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"expected numbers, got {text!r}") from None
    if not values:
        raise ConfigurationError("expected at least one number, got an empty list")
    return values


def parse_assignments(items) -> dict[str, float]:
    out = {}
    for item in items or []:
        for part in str(item).split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise ConfigurationError(f"expected name=value, got {part!r}")
            k, v = part.split("=", 1)
            try:
                out[k.strip()] = float(v)
            except ValueError:
                raise ConfigurationError(f"{k.strip()}: value {v!r} is not a number") from None
    return out


def parse_mode(text: str) -> tuple[str, int]:
    text = str(text).strip().upper()
    if len(text) < 3 or text[:2] not in ("TE", "TM") or not text[2:].isdigit():
        raise ConfigurationError(f"mode must look like TE0 or TM2, got {text!r}")
    return text[:2], int(text[2:])


def _fnum(v, name):
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name}: expected a number, got {v!r}") from None


def _pick(args, cfg: RunConfig, section: str, key: str, default=None, attr: str | None = None):
    """Flag value, else config value, else default."""
    v = getattr(args, attr or key, None)
    if v is not None:
        return v
    return cfg.get(section, key, default)


# -- output helpers ---------------------------------------------------------

class Output:
    def __init__(self, root: Path, quiet: bool):
        self.root = Path(root)
        self.quiet = quiet
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        return self.root / name

    def text(self, name: str, data: str) -> Path:
        p = self.path(name)
        kvconfig.atomic_write(p, data)
        self.written.append(p)
        return p

    def json(self, name: str, obj) -> Path:
        return self.text(name, dumps_json(obj))

    def table(self, name: str, meta, names, columns) -> Path:
        return self.text(name, write_table(meta, names, columns))

    def say(self, line: str = "") -> None:
        if not self.quiet:
            print(line)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _fmt(v, digits=6):
    return f"{v:.{digits}g}"


# -- modes ------------------------------------------------------------------

def cmd_modes(args, cfg: RunConfig, out: Output) -> int:
    from .geometry import CrossSection
    from .material import MaterialLibrary
    from .modesolver import dump_fields_csv
    from .phasematch import find_phasematch_width, solve_selected_mode, sweep_neff

    stack = stack_from_section(cfg.sections["stack"]) if "stack" in cfg.sections else LayerStack()
    widths = parse_range(_pick(args, cfg, "modes", "widths", "0.8:1.3:0.05"))
    h = _fnum(_pick(args, cfg, "modes", "h", 0.02), "h")
    margin = _fnum(_pick(args, cfg, "modes", "margin", 1.5), "margin")
    angle = _fnum(_pick(args, cfg, "modes", "sidewall_angle", DEFAULT_SIDEWALL, "sidewall"),
                  "sidewall_angle")
    lam_s = _fnum(cfg.get("modes", "signal_wavelength", 1.55), "signal_wavelength")
    lam_p = _fnum(cfg.get("modes", "pump_wavelength", 0.775), "pump_wavelength")
    mode_s = parse_mode(cfg.get("modes", "signal_mode", "TE0"))
    mode_p = parse_mode(cfg.get("modes", "pump_mode", "TM2"))
    dump = kvconfig.as_bool("modes", "dump_fields", cfg.get("modes", "dump_fields", "true"))
    if args.no_fields:
        dump = False
    library = MaterialLibrary.load(cfg.materials) if cfg.materials else None
    kw = dict(sidewall_angle=angle, h=h, margin=margin, library=library, jobs=cfg.jobs)
    sig = sweep_neff(stack, widths, lam_s, mode_s, **kw)
    pum = sweep_neff(stack, widths, lam_p, mode_p, **kw)
    ns = dict(zip(sig.values, sig.n_eff))
    npump = dict(zip(pum.values, pum.n_eff))
    col_s = f"neff_{mode_s[0]}{mode_s[1]}_{lam_s * 1000:.0f}nm_idx"
    col_p = f"neff_{mode_p[0]}{mode_p[1]}_{lam_p * 1000:.0f}nm_idx"
    meta = {"h_um": h, "sidewall_deg": angle, "film_um": stack.film_thickness,
            "etch_um": stack.etch_depth, "box_um": stack.box_thickness}
    ws = sorted(widths)
    out.table("neff_sweep.csv", meta, ["top_width_um", col_s, col_p],
              [ws, [ns.get(w, math.nan) for w in ws], [npump.get(w, math.nan) for w in ws]])
    report = {"signal": {"mode": f"{mode_s[0]}{mode_s[1]}", "wavelength_um": lam_s,
                         "cutoff_widths_um": list(sig.cutoff)},
              "pump": {"mode": f"{mode_p[0]}{mode_p[1]}", "wavelength_um": lam_p,
                       "cutoff_widths_um": list(pum.cutoff)},
              "h_um": h, "sidewall_deg": angle}
    if sig.empty or pum.empty:
        report.update(crossed=False, reason="mode not guided at any width")
        out.json("phasematch.json", report)
        out.say("no phase match: a mode is not guided anywhere in the sweep")
        return EXIT_OK
    pm = find_phasematch_width(sig, pum)
    report.update(crossed=pm.crossed, width_um=pm.width, delta_neff=pm.delta,
                  neff=pm.n_eff, crossings=pm.crossings)
    out.json("phasematch.json", report)
    if pm.crossed:
        out.say(f"phase match at top width {pm.width:.4f} um (n_eff {pm.n_eff:.6f}, "
                f"|dn| {pm.delta:.1e})")
        if dump:
            xs = CrossSection(pm.width, angle, stack)
            for lam, sel in ((lam_s, mode_s), (lam_p, mode_p)):
                mode = solve_selected_mode(xs, lam, sel, h=h, margin=margin, library=library)
                if mode is None:
                    raise ModeSolverError(f"{sel[0]}{sel[1]} not found at the crossing width")
                p = out.path(f"fields_{sel[0]}{sel[1]}_{lam * 1000:.0f}nm.csv")
                dump_fields_csv(mode, p)
                out.written.append(p)
    else:
        out.say(f"no crossing in sweep; closest |dn| = {pm.delta:.3e} at {pm.width:.4f} um")
    return EXIT_OK


# -- cavity -----------------------------------------------------------------

def _cavity_setup(args, cfg):
    lam = _fnum(_pick(args, cfg, "cavity", "wavelength_nm", 775.0), "wavelength_nm")
    q = _fnum(_pick(args, cfg, "cavity", "q_loaded", 7.1e4, "q"), "q_loaded")
    esc = _fnum(_pick(args, cfg, "cavity", "escape", 0.55), "escape")
    params = cav.CavityParams.from_q(lam, q, esc)
    pr = cav.PhotorefractiveParams(
        beta=_fnum(_pick(args, cfg, "cavity", "beta", 17.4), "beta"),
        tau=_fnum(_pick(args, cfg, "cavity", "tau", 30.0), "tau"),
        buildup_norm=_fnum(cfg.get("cavity", "buildup_norm", 1.0), "buildup_norm"))
    return params, pr


def _lineshape(trace: Trace, params: cav.CavityParams):
    """Asymmetry, deviation from the cold Lorentzian, label and fitted Q.

    ``lorentzian`` needs |A| < 0.02 and a 1 % match; a symmetric dip that is
    widened or displaced by the slow shift is ``stretched``.
    """
    a = cav.asymmetry(trace)
    dev = cav.max_deviation_from_lorentzian(trace, params)
    if abs(a) >= 0.02:
        shape = "sharkfin"
    elif dev < 0.01:
        shape = "lorentzian"
    else:
        shape = "stretched"
    q_fit = math.nan
    if shape == "lorentzian":
        try:
            q_fit = cav.fit_resonance(trace, "lorentzian", params.regime).cavity.q_loaded
        except FitError:
            q_fit = math.nan
    return a, dev, shape, q_fit


def cmd_cavity(args, cfg: RunConfig, out: Output) -> int:
    params, pr = _cavity_setup(args, cfg)
    powers = parse_range(_pick(args, cfg, "cavity", "powers", "1,2,3,5"))
    speeds = parse_range(_pick(args, cfg, "cavity", "speeds", "0.1,1,10,100"))
    p_speed = _fnum(_pick(args, cfg, "cavity", "power_speed", 0.5), "power_speed")
    s_power = _fnum(_pick(args, cfg, "cavity", "speed_power", 0.9), "speed_power")
    pad = _fnum(cfg.get("cavity", "window_pad", 2.0), "window_pad")
    max_points = int(_fnum(cfg.get("cavity", "max_points", 20000), "max_points"))
    slope_target = _pick(args, cfg, "cavity", "calibrate_slope", None)
    calib = None
    if slope_target is not None:
        pr, reg = cav.calibrate_beta(params, pr, _fnum(slope_target, "calibrate_slope"),
                                     p_speed, powers)
        calib = {"target_slope_nm_per_mw": float(slope_target), "beta_nm_per_mw": pr.beta}
    out.say(f"cavity: {params.wavelength_nm} nm, Q {params.q_loaded:.4g}, "
            f"FWHM {params.linewidth_nm * 1e3:.4g} pm, beta {pr.beta:.6g} nm/mW, tau {pr.tau:g} s")

    rows = []
    for p in powers:
        tr = cav.simulate_scan(params, pr, p_speed, p, cav.scan_window(params, pr, p, pad))
        a, _, shape, q_fit = _lineshape(tr, params)
        rows.append((p, cav.dip_center(tr), a, sum(cav.dip_widths(tr)), q_fit, shape))
        out.text(f"scan_power_{p:g}mw.csv", tr.decimate(max_points).to_csv())
    xs = np.array([r[0] for r in rows])
    centers = np.array([r[1] for r in rows])
    out.table("power_summary.csv", {"scan_speed_nm_per_s": p_speed, "lineshape": ";".join(
        r[5] for r in rows)}, ["power_mw", "dip_center_nm", "asymmetry_frac", "fwhm_nm",
                                "q_loaded_fit_lin"],
        [xs, centers, [r[2] for r in rows], [r[3] for r in rows], [r[4] for r in rows]])
    regression = {"powers_mw": xs.tolist(), "dip_centers_nm": centers.tolist(),
                  "scan_speed_nm_per_s": p_speed, "beta_nm_per_mw": pr.beta, "tau_s": pr.tau,
                  "lineshapes": [r[5] for r in rows], "asymmetry": [r[2] for r in rows]}
    if len(xs) >= 2:
        slope, intercept = np.polyfit(xs, centers, 1)
        fitv = slope * xs + intercept
        ss_tot = float(np.sum((centers - centers.mean()) ** 2))
        r2 = 1.0 - float(np.sum((centers - fitv) ** 2)) / ss_tot if ss_tot > 0 else 1.0
        regression.update(slope_nm_per_mw=float(slope), intercept_nm=float(intercept), r2=r2)
        out.say(f"dip centre vs power: slope {slope:.4f} nm/mW, R^2 {r2:.6f}")
    if calib:
        regression["calibration"] = calib

    srows = []
    for v in speeds:
        tr = cav.simulate_scan(params, pr, v, s_power, cav.scan_window(params, pr, s_power, pad))
        a, dev, shape, _ = _lineshape(tr, params)
        srows.append((v, a, dev, shape))
        out.text(f"scan_speed_{v:g}nm_s.csv", tr.decimate(max_points).to_csv())
    out.table("speed_summary.csv", {"input_power_mw": s_power,
                                    "lineshape": ";".join(r[3] for r in srows)},
              ["scan_speed_nm_per_s", "asymmetry_frac", "max_dev_lorentzian_frac"],
              [[r[0] for r in srows], [r[1] for r in srows], [r[2] for r in srows]])
    regression["speed_ladder"] = {"speeds_nm_per_s": [r[0] for r in srows],
                                  "asymmetry": [r[1] for r in srows],
                                  "max_dev_lorentzian": [r[2] for r in srows],
                                  "lineshapes": [r[3] for r in srows]}
    out.json("cavity_summary.json", regression)
    for v, a, dev, shape in srows:
        out.say(f"  {v:g} nm/s: asymmetry {a:+.4f}, max |T - Lorentzian| {dev:.4f} ({shape})")
    return EXIT_OK


# -- opo --------------------------------------------------------------------

def _squeezer(args, cfg) -> opo.SqueezerParams:
    eta = _fnum(_pick(args, cfg, "squeezer", "eta", 0.23), "eta")
    fs = _fnum(_pick(args, cfg, "squeezer", "fs", 310.0), "fs")
    p_th = _pick(args, cfg, "squeezer", "p_th", None, "pth")
    pp = _pick(args, cfg, "squeezer", "pump_power", None, "pp")
    ratio = _pick(args, cfg, "squeezer", "ratio", None)
    if ratio is not None:
        if pp is not None and p_th is not None:
            raise ConfigurationError("give either ratio or pump_power and p_th, not both")
        return opo.SqueezerParams.from_ratio(eta, _fnum(ratio, "ratio"), fs,
                                             _fnum(p_th if p_th is not None else 1.0, "p_th"))
    if pp is None or p_th is None:
        return opo.SqueezerParams.from_ratio(eta, 0.02, fs)
    return opo.SqueezerParams(eta, _fnum(p_th, "p_th"), fs, _fnum(pp, "pump_power"))


def cmd_opo(args, cfg: RunConfig, out: Output) -> int:
    sub = args.sub
    if sub == "squeeze":
        return _opo_squeeze(args, cfg, out)
    if sub == "gain":
        return _opo_gain(args, cfg, out)
    if sub == "threshold":
        if args.gplus is None or args.pp is None:
            raise ConfigurationError("threshold needs --gplus and --pp")
        est = opo.threshold_from_gain(args.gplus, args.pp, args.gminus)
        rep = {"g_plus": args.gplus, "pump_power_mw": args.pp, "p_th_mw": est.p_th}
        out.say(f"P_th = {est.p_th:.4f} mW (from G+ = {args.gplus:g} at {args.pp:g} mW)")
        gp, gm = opo.gain_envelopes(args.pp, est.p_th)
        rep["predicted_g_minus"] = gm
        out.say(f"predicted G- at that threshold = {gm:.4f}")
        if est.p_th_minus is not None:
            rep.update(g_minus=args.gminus, p_th_from_g_minus_mw=est.p_th_minus,
                       relative_spread=est.spread)
            gap = abs(gm - args.gminus)
            rep.update(g_minus_gap=gap, branches_consistent=bool(gap <= args.gain_tol),
                       gain_tolerance=args.gain_tol)
            verdict = "consistent" if gap <= args.gain_tol else "inconsistent"
            out.say(f"P_th from G- = {args.gminus:g}: {est.p_th_minus:.4f} mW "
                    f"(branch spread {est.spread * 100:.2f}%)")
            out.say(f"branches {verdict}: |G-(predicted) - G-(measured)| = {gap:.4f} "
                    f"(tolerance {args.gain_tol:g})")
        out.json("threshold.json", rep)
        return EXIT_OK
    if sub == "budget":
        values = {}
        for name in ("qe", "vis2", "opt", "esc"):
            v = getattr(args, name)
            if v is None:
                v = cfg.get("budget", name)
            if v is not None:
                values[name] = v
        for k, v in cfg.sections.get("budget", {}).items():
            values.setdefault(k, v)
        for item in args.factor or []:
            if "=" not in item:
                raise ConfigurationError(f"--factor expects name=value, got {item!r}")
            k, v = item.split("=", 1)
            values[k.strip()] = v.strip()
        if not values:
            values = {"qe": 0.85, "vis2": 0.98, "opt": 0.45, "esc": 0.55}
        b = opo.EfficiencyBudget.from_mapping(values)
        rep = {"qe": b.qe, "vis2": b.vis2, "opt": b.opt, "esc": b.esc,
               "opt_factors": dict(b.opt_factors), "external": b.external,
               "total": b.total, "total_db": b.total_db}
        out.say(f"total efficiency {b.total:.4f} ({b.total_db:.2f} dB); "
                f"external {b.external:.4f}")
        out.json("budget.json", rep)
        return EXIT_OK
    if sub == "project":
        rep = {}
        if args.eta is not None:
            f = args.f or 0.0
            s = opo.project_threshold_limit(args.eta, f, args.fs)
            rep.update(eta=args.eta, sideband_mhz=f, s_minus_limit_lin=s,
                       s_minus_limit_db=opo.to_db(s))
            out.say(f"S- at threshold (eta {args.eta:g}): {opo.to_db(s):.3f} dB")
        if args.smeas_db is not None:
            if args.eta_ext is None:
                raise ConfigurationError("--smeas-db needs --eta-ext")
            s = opo.infer_onchip(opo.from_db(args.smeas_db), args.eta_ext)
            rep.update(s_meas_db=args.smeas_db, eta_external=args.eta_ext,
                       s_onchip_lin=s, s_onchip_db=opo.to_db(s))
            out.say(f"on-chip noise for {args.smeas_db:g} dB measured: {opo.to_db(s):.3f} dB")
        if not rep:
            raise ConfigurationError("project needs --eta and/or --smeas-db with --eta-ext")
        out.json("project.json", rep)
        return EXIT_OK
    if sub == "homodyne":
        params = _squeezer(args, cfg)
        f = _fnum(_pick(args, cfg, "homodyne", "f", 5.0), "f")
        tr = opo.homodyne_trace(
            params, f,
            lo_scan_rate=_fnum(_pick(args, cfg, "homodyne", "lo_scan_rate", 0.5, "lo_rate"), "lo_rate"),
            duration=_fnum(_pick(args, cfg, "homodyne", "duration", 4.0), "duration"),
            rbw=_fnum(_pick(args, cfg, "homodyne", "rbw", 1e6), "rbw"),
            vbw=_fnum(_pick(args, cfg, "homodyne", "vbw", 100.0), "vbw"),
            seed=cfg.seed)
        out.text("homodyne.csv", tr.to_csv())
        out.say(f"homodyne trace: {len(tr)} samples, ideal S- {tr.meta['s_minus_db']:.3f} dB, "
                f"S+ {tr.meta['s_plus_db']:.3f} dB")
        return EXIT_OK
    raise ConfigurationError(f"unknown opo subcommand {sub!r}")


def _opo_squeeze(args, cfg, out):
    if args.sminus_db is not None or args.splus_db is not None:
        if args.sminus_db is None or args.splus_db is None:
            raise ConfigurationError("inversion needs both --sminus-db and --splus-db")
        f = args.f[0] if args.f else 5.0
        fs = _fnum(_pick(args, cfg, "squeezer", "fs", 310.0), "fs")
        est = opo.infer_eta_x(opo.from_db(args.sminus_db), opo.from_db(args.splus_db), f, fs)
        rep = {"s_minus_db": args.sminus_db, "s_plus_db": args.splus_db, "sideband_mhz": f,
               "fs_mhz": fs, "eta": est.eta, "x": est.x, "ratio": est.ratio,
               "flags": list(est.flags)}
        out.say(f"eta = {est.eta:.4f}, x = {est.x:.4f} (Pp/P_th = {est.ratio:.4f})")
        out.json("squeeze_inversion.json", rep)
        return EXIT_OK
    params = _squeezer(args, cfg)
    freqs = args.f or [5.0, 325.0]
    npow = opo.noise_power(params, np.asarray(freqs, dtype=float))
    out.table("squeeze.csv", {"eta": params.eta, "ratio": params.ratio, "fs_mhz": params.fs},
              ["frequency_mhz", "s_minus_db", "s_plus_db"],
              [freqs, npow.minus_db, npow.plus_db])
    for f, m, p in zip(freqs, np.atleast_1d(npow.minus_db), np.atleast_1d(npow.plus_db)):
        out.say(f"f = {f:g} MHz: S- = {m:+.3f} dB, S+ = {p:+.3f} dB")
    return EXIT_OK


def _opo_gain(args, cfg, out):
    pp = args.pp if args.pp is not None else 10.0
    p_th = args.pth if args.pth is not None else 52.5
    gp, gm = opo.gain_envelopes(pp, p_th)
    rep = {"pump_power_mw": pp, "p_th_mw": p_th, "g_plus": gp, "g_minus": gm,
           "g_theta": opo.parametric_gain(pp, p_th, args.theta or 0.0), "theta_rad": args.theta or 0.0}
    out.say(f"G+ = {gp:.4f}, G- = {gm:.4f} at {pp:g} / {p_th:g} mW")
    if args.trace:
        params = cav.CavityParams.from_q(775.0, 7.1e4, 0.55)
        pr = cav.PhotorefractiveParams(beta=0.01, tau=30.0)
        window = (params.wavelength_nm - 0.15, params.wavelength_nm + 0.05)
        build = cav.simulate_scan(params, pr, 0.001, pp, window, output="buildup",
                                  steps_per_linewidth=200)
        g = opo.gain_trace(build, pp, p_th, args.ripple_rate or opo.DEFAULT_RIPPLE_RATE)
        out.text("gain_trace.csv", write_table(g.meta, ["wavelength_nm", "buildup_frac", "gain_lin"],
                                               [g.x, build.y, g.y]))
    out.json("gain.json", rep)
    return EXIT_OK


# -- fit --------------------------------------------------------------------

def bundled_path(name: str) -> Path:
    return Path(str(resources.files("sqzforge") / "data" / name))


def read_squeezing(path) -> tuple[str, np.ndarray, np.ndarray | None, np.ndarray | None, dict]:
    """Squeezing table: x column plus ``s_minus_*`` / ``s_plus_*`` in dB or linear."""
    text = Path(path).read_text() if Path(path).is_file() else None
    if text is None:
        raise ConfigurationError(f"data file not found: {path}")
    meta, names, cols = read_table(text, str(path))
    if names[0] not in ("power_mw", "frequency_mhz"):
        raise SchemaError(f"squeezing data must start with power_mw or frequency_mhz, got {names[0]!r}", 1)
    branches = {}
    for name, col in zip(names[1:], cols[1:]):
        for b in ("s_minus", "s_plus"):
            if name == f"{b}_db":
                branches[b] = opo.from_db(col)
            elif name == f"{b}_lin":
                branches[b] = col
    if not branches:
        raise SchemaError("no s_minus_db/s_plus_db (or _lin) columns found", 1)
    return names[0], cols[0], branches.get("s_minus"), branches.get("s_plus"), meta


def cmd_fit(args, cfg: RunConfig, out: Output) -> int:
    sub = args.sub
    data = _pick(args, cfg, "fit", "data", None)
    domain = _pick(args, cfg, "fit", "domain", "linear")
    fix = parse_assignments(args.fix or ([cfg.get("fit", "fix")] if cfg.get("fit", "fix") else []))
    if sub == "lineshape":
        if data is None:
            raise ConfigurationError("fit lineshape needs --data")
        return _fit_lineshape(args, cfg, out, Path(data))
    default = {"power": "squeezing_vs_power.csv", "frequency": "squeezing_vs_frequency.csv"}[sub]
    path = Path(data) if data is not None else bundled_path(default)
    kind, xv, sm, sp, meta = read_squeezing(path)
    if sub == "power":
        if kind != "power_mw":
            raise SchemaError("fit power needs a power_mw column", 1)
        f = _fnum(_pick(args, cfg, "fit", "f", meta.get("sideband_mhz", 5.0)), "f")
        fs = _fnum(fix.pop("fs", _pick(args, cfg, "fit", "fs", meta.get("fs_mhz", 310.0))), "fs")
        if fix:
            raise ConfigurationError(f"fit power can only fix fs, got {sorted(fix)}")
        fit_fs = bool(args.fit_fs) or kvconfig.as_bool("fit", "fit_fs", cfg.get("fit", "fit_fs", "false"))
        res = fitmod.fit_squeezing_vs_power(xv, sm, sp, f=f, fs=fs, fit_fs=fit_fs, domain=domain)
        design = lambda xs, b: np.column_stack([xs, np.full(len(xs), b), np.full(len(xs), f)])
    else:
        if kind != "frequency_mhz":
            raise SchemaError("fit frequency needs a frequency_mhz column", 1)
        res = fitmod.fit_squeezing_vs_frequency(xv, sm, sp, fix=fix, domain=domain)
        design = lambda xs, b: np.column_stack([xs, np.full(len(xs), b)])
    fitmod.require_converged(res)
    report = res.as_dict()
    report["data"] = str(path) if data is not None else f"bundled:{default}"
    out.json("fit.json", report)
    nanv = np.full(len(xv), math.nan)
    out.table("overlay.csv", {"model": res.model},
              [kind, "s_minus_db", "s_plus_db", "s_minus_fit_db", "s_plus_fit_db"],
              [xv, opo.to_db(sm) if sm is not None else nanv,
               opo.to_db(sp) if sp is not None else nanv,
               opo.to_db(fitmod.model_curve(res, design(xv, -1.0))),
               opo.to_db(fitmod.model_curve(res, design(xv, 1.0)))])
    grid = np.linspace(0.0, float(np.max(xv)) * 1.1, 101)
    out.table("curve.csv", {"model": res.model}, [kind, "s_minus_fit_db", "s_plus_fit_db"],
              [grid, opo.to_db(fitmod.model_curve(res, design(grid, -1.0))),
               opo.to_db(fitmod.model_curve(res, design(grid, 1.0)))])
    parts = ", ".join(f"{n} = {_fmt(res[n])} (fixed)" if n in res.fixed
                      else f"{n} = {_fmt(res[n])} +- {_fmt(res.error(n), 2)}" for n in res.names)
    out.say(f"{res.model}: {parts} ({res.reason}, {res.iterations} iterations)")
    if res.flags:
        out.say("flags: " + ", ".join(res.flags))
    return EXIT_OK


def _fit_lineshape(args, cfg, out, path: Path) -> int:
    from .trace import read_trace

    trace = read_trace(path)
    regime = _pick(args, cfg, "fit", "regime", "over")
    model = args.model or "lorentzian"
    kw = {}
    if model == "sharkfin":
        params, pr = _cavity_setup(args, cfg)
        kw = dict(cavity=params, photorefractive=pr, scan_speed=args.scan_speed,
                  input_power=args.input_power)
    rf = cav.fit_resonance(trace, model, regime, **kw)
    c = rf.cavity
    report = rf.result.as_dict()
    report["derived"] = {"wavelength_nm": c.wavelength_nm, "kappa0_hz": c.kappa0,
                         "kappae_hz": c.kappae, "q_loaded": c.q_loaded, "regime": c.regime,
                         "escape_efficiency": c.escape_efficiency,
                         "stderr": rf.stderr}
    if rf.photorefractive is not None:
        report["derived"]["beta_nm_per_mw"] = rf.photorefractive.beta
    out.json("fit.json", report)
    tr = trace.ascending()
    if model == "lorentzian":
        model_y = cav.lorentzian_trace(c, tr.x)
    else:
        speed = cav.scan_setting(args.scan_speed, tr.meta, "scan_speed_nm_per_s")
        power = cav.scan_setting(args.input_power, tr.meta, "input_power_mw")
        sim = cav.simulate_scan(c, rf.photorefractive, speed, power,
                                (tr.x[0], tr.x[-1])).ascending()
        model_y = np.interp(tr.x, sim.x, sim.y)
    out.table("overlay.csv", {"model": model}, ["wavelength_nm", "transmission_frac",
                                                "model_transmission_frac"], [tr.x, tr.y, model_y])
    out.say(f"{model}: lambda0 {c.wavelength_nm:.6f} nm, Q {c.q_loaded:.5g}, regime {c.regime}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="run configuration file")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--seed", default=d, help="random seed (unsigned 64-bit)")
    p.add_argument("--jobs", default=d, help="worker threads for sweeps (0 = all cores)")
    p.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="suppress the standard-output report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sqzforge", description=__doc__.split("\n")[0])
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("modes", help="n_eff sweeps and the phase-matching width")
    _common(m, True)
    m.add_argument("--widths", help="top widths, start:stop:step or a list (um)")
    m.add_argument("--h", type=float, help="grid spacing (um)")
    m.add_argument("--margin", type=float, help="cladding margin around the ridge (um)")
    m.add_argument("--sidewall", type=float, help="sidewall angle (degrees)")
    m.add_argument("--no-fields", action="store_true", help="skip field-map dumps")

    c = sub.add_parser("cavity", help="photorefractive scans, power and speed ladders")
    _common(c, True)
    c.add_argument("--powers", help="input powers (mW)")
    c.add_argument("--speeds", help="scan speeds (nm/s)")
    c.add_argument("--power-speed", type=float, help="scan speed of the power ladder (nm/s)")
    c.add_argument("--speed-power", type=float, help="input power of the speed ladder (mW)")
    c.add_argument("--beta", type=float, help="photorefractive shift (nm/mW)")
    c.add_argument("--tau", type=float, help="photorefractive relaxation time (s)")
    c.add_argument("--calibrate-slope", type=float, help="calibrate beta to this slope (nm/mW)")
    c.add_argument("--q", type=float, help="loaded Q")
    c.add_argument("--wavelength-nm", type=float, help="resonance wavelength (nm)")
    c.add_argument("--escape", type=float, help="escape efficiency")

    o = sub.add_parser("opo", help="gain, threshold, squeezing, budget, projections")
    _common(o, True)
    osub = o.add_subparsers(dest="sub", required=True, parser_class=_Parser)
    sq = osub.add_parser("squeeze", help="noise spectrum, or invert a measured pair")
    gn = osub.add_parser("gain", help="amplification / deamplification")
    th = osub.add_parser("threshold", help="threshold from measured gain")
    bu = osub.add_parser("budget", help="efficiency budget")
    pr = osub.add_parser("project", help="threshold limit and on-chip inference")
    ho = osub.add_parser("homodyne", help="synthetic zero-span trace")
    for q in (sq, gn, th, bu, pr, ho):
        _common(q, True)
    for q in (sq, ho):
        q.add_argument("--eta", type=float)
        q.add_argument("--ratio", type=float, help="Pp / P_th")
        q.add_argument("--pp", type=float, help="pump power (mW)")
        q.add_argument("--pth", type=float, help="threshold (mW)")
        q.add_argument("--fs", type=float, help="cavity half width (MHz)")
    sq.add_argument("--f", type=lambda s: parse_range(s), help="sideband frequencies (MHz)")
    sq.add_argument("--sminus-db", type=float)
    sq.add_argument("--splus-db", type=float)
    ho.add_argument("--f", type=float, help="sideband frequency (MHz)")
    ho.add_argument("--duration", type=float, help="trace length (s)")
    ho.add_argument("--lo-rate", type=float, help="LO phase scan rate (Hz)")
    ho.add_argument("--rbw", type=float)
    ho.add_argument("--vbw", type=float)
    gn.add_argument("--pp", type=float)
    gn.add_argument("--pth", type=float)
    gn.add_argument("--theta", type=float, help="relative phase (rad)")
    gn.add_argument("--trace", action="store_true", help="gain along a shark-fin pump scan")
    gn.add_argument("--ripple-rate", type=float, help="phase-slip rate (cycles/nm)")
    th.add_argument("--gplus", type=float)
    th.add_argument("--gminus", type=float)
    th.add_argument("--pp", type=float)
    th.add_argument("--gain-tol", type=float, default=0.05,
                    help="allowed gap between predicted and measured G-")
    for name in ("qe", "vis2", "opt", "esc"):
        bu.add_argument(f"--{name}")
    bu.add_argument("--factor", action="append", help="optical sub-factor name=value[dB]")
    pr.add_argument("--eta", type=float)
    pr.add_argument("--f", type=float)
    pr.add_argument("--fs", type=float)
    pr.add_argument("--smeas-db", type=float)
    pr.add_argument("--eta-ext", type=float)

    f = sub.add_parser("fit", help="fit squeezing or lineshape data")
    _common(f, True)
    fsub = f.add_subparsers(dest="sub", required=True, parser_class=_Parser)
    for name in ("power", "frequency", "lineshape"):
        q = fsub.add_parser(name)
        _common(q, True)
        q.add_argument("--data", help="input CSV (default: bundled synthetic set)")
        q.add_argument("--fix", action="append", help="hold parameters, e.g. fs=310")
        q.add_argument("--domain", choices=("linear", "db"))
        q.add_argument("--f", type=float, help="sideband frequency of power data (MHz)")
        q.add_argument("--fs", type=float, help="cavity half width for power fits (MHz)")
        q.add_argument("--fit-fs", action="store_true")
        q.add_argument("--regime", choices=("over", "under", "critical"))
        q.add_argument("--model", choices=("lorentzian", "sharkfin"))
        q.add_argument("--q", type=float)
        q.add_argument("--wavelength-nm", type=float)
        q.add_argument("--escape", type=float)
        q.add_argument("--beta", type=float)
        q.add_argument("--tau", type=float)
        q.add_argument("--scan-speed", type=float, help="laser scan speed of the trace (nm/s)")
        q.add_argument("--input-power", type=float, help="on-chip power of the trace (mW)")
    return p


COMMANDS = {"modes": cmd_modes, "cavity": cmd_cavity, "opo": cmd_opo, "fit": cmd_fit}


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.out is not None:
        cfg.out = Path(args.out)
    if args.seed is not None:
        cfg.seed = parse_seed(args.seed)
    if args.jobs is not None:
        cfg.jobs = parse_jobs(args.jobs)
    if args.quiet:
        cfg.quiet = True
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        out = Output(cfg.out, cfg.quiet)
        return COMMANDS[args.command](args, cfg, out)
    except (ConfigurationError, UnphysicalError, ThresholdError, WavelengthRangeError) as exc:
        print(f"sqzforge: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FitError, ModeSolverError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"sqzforge: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
