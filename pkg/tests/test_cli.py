import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sqzforge.cli import main, parse_jobs, parse_range, parse_seed
from sqzforge.errors import ConfigurationError
from sqzforge.trace import read_table, read_trace

DEMO_CONFIGS = Path(__file__).resolve().parents[1] / "demos" / "configs"


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    if capsys is None:
        return code
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def snapshot(directory: Path) -> dict:
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file()}


# argument helpers

def test_parse_range():
    assert np.allclose(parse_range("1.0:1.2:0.05"), [1.0, 1.05, 1.1, 1.15, 1.2])
    assert parse_range("1.0:1.0:1") == [1.0]
    assert parse_range("1,2, 3.5") == [1.0, 2.0, 3.5]
    for bad in ("1:2", "1:2:0", "2:1:0.1", "a,b", ""):
        with pytest.raises(ConfigurationError):
            parse_range(bad)


def test_parse_seed_and_jobs():
    assert parse_seed("18446744073709551615") == 2 ** 64 - 1
    for bad in ("-1", "18446744073709551616", "1.5", "x"):
        with pytest.raises(ConfigurationError):
            parse_seed(bad)
    assert parse_jobs("0") >= 1
    assert parse_jobs("3") == 3
    with pytest.raises(ConfigurationError):
        parse_jobs("-2")


# opo

def test_threshold_report(tmp_path, capsys):
    code, out, _ = run(["opo", "threshold", "--gplus", "3.15", "--pp", "10", "--gminus", "0.5",
                        "--out", tmp_path], capsys)
    assert code == 0
    assert "P_th = 52.46" in out and "branches consistent" in out
    rep = json.loads((tmp_path / "threshold.json").read_text())
    assert rep["p_th_mw"] == pytest.approx(52.47, abs=0.01)
    assert rep["p_th_from_g_minus_mw"] == pytest.approx(58.28, abs=0.01)
    assert rep["branches_consistent"] is True


def test_budget_report(tmp_path, capsys):
    code, out, _ = run(["opo", "budget", "--qe", "0.85", "--vis2", "0.98", "--opt", "0.45",
                        "--esc", "0.55", "--out", tmp_path], capsys)
    assert code == 0
    assert "0.2062" in out and "-6.86 dB" in out
    rep = json.loads((tmp_path / "budget.json").read_text())
    assert rep["total"] == pytest.approx(0.206, abs=5e-4)


def test_budget_factor_in_db(tmp_path):
    assert run(["opo", "budget", "--qe", "0.85", "--vis2", "0.98", "--esc", "0.55",
                "--factor", "gc_in=-1.7dB", "--factor", "gc_out=-1.8dB", "--out", tmp_path]) == 0
    rep = json.loads((tmp_path / "budget.json").read_text())
    assert rep["opt"] == pytest.approx(10 ** -0.35, rel=1e-9)


def test_project_report(tmp_path, capsys):
    code, out, _ = run(["opo", "project", "--eta", "0.24", "--out", tmp_path], capsys)
    assert code == 0 and "-1.192 dB" in out
    code, out, _ = run(["opo", "project", "--smeas-db", "-0.46", "--eta-ext", "0.375",
                        "--out", tmp_path], capsys)
    assert code == 0 and "on-chip noise" in out
    rep = json.loads((tmp_path / "project.json").read_text())
    assert rep["s_onchip_db"] == pytest.approx(-1.355, abs=1e-3)


def test_squeeze_and_inversion(tmp_path, capsys):
    code, out, _ = run(["opo", "squeeze", "--eta", "0.23", "--ratio", "0.02", "--fs", "310",
                        "--f", "5,325", "--out", tmp_path], capsys)
    assert code == 0
    meta, names, cols = read_table((tmp_path / "squeeze.csv").read_text())
    assert names == ["frequency_mhz", "s_minus_db", "s_plus_db"]
    assert cols[1][0] == pytest.approx(-0.457, abs=1e-3)
    assert cols[2][1] == pytest.approx(0.297, abs=1e-3)
    code, out, _ = run(["opo", "squeeze", "--sminus-db", "-0.46", "--splus-db", "0.75",
                        "--f", "5", "--fs", "310", "--out", tmp_path], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "squeeze_inversion.json").read_text())
    assert rep["eta"] == pytest.approx(0.215, abs=1e-3)


def test_gain_trace_output(tmp_path):
    assert run(["opo", "gain", "--pp", "10", "--pth", "52.5", "--trace", "--out", tmp_path]) == 0
    rep = json.loads((tmp_path / "gain.json").read_text())
    assert rep["g_plus"] == pytest.approx(3.15, abs=0.01)
    tr = read_trace(tmp_path / "gain_trace.csv", y_name="gain_lin")
    assert tr.x_kind == "wavelength_nm"
    assert tr.y.max() <= rep["g_plus"] + 1e-9 and tr.y.min() >= rep["g_minus"] - 1e-9


@pytest.mark.parametrize("argv, code", [
    (["opo", "squeeze", "--eta", "0.2", "--pp", "60", "--pth", "50", "--fs", "310"], 2),
    (["opo", "project", "--smeas-db", "-3", "--eta-ext", "0.375"], 2),
    (["opo", "threshold", "--gplus", "0.9", "--pp", "10"], 2),
    (["opo", "budget", "--qe", "1.3", "--vis2", "1"], 2),
    (["opo", "squeeze", "--sminus-db", "0.2", "--splus-db", "0.75"], 2),
    (["opo", "homodyne", "--rbw", "10", "--vbw", "100"], 2),
    (["opo", "teleport"], 2),
    (["--seed", "-4", "opo", "gain"], 2),
    (["opo", "gain", "--pp", "ten"], 2),
])
def test_invalid_inputs_exit_2(tmp_path, capsys, argv, code):
    got, _, err = run(argv + ["--out", tmp_path], capsys)
    assert got == code
    assert "sqzforge: " in err and "error" in err


def test_homodyne_seed_determinism(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    base = ["opo", "homodyne", "--eta", "0.23", "--ratio", "0.02", "--fs", "310"]
    assert run(base + ["--seed", "7", "--out", a]) == 0
    assert run(base + ["--seed", "7", "--out", b]) == 0
    assert run(base + ["--seed", "8", "--out", c]) == 0
    assert snapshot(a) == snapshot(b)
    assert snapshot(a) != snapshot(c)


# cavity

def test_cavity_ladders(tmp_path):
    assert run(["cavity", "--out", tmp_path, "-q"]) == 0
    summary = json.loads((tmp_path / "cavity_summary.json").read_text())
    assert summary["slope_nm_per_mw"] < 0 and summary["r2"] > 0.99
    meta, names, cols = read_table((tmp_path / "power_summary.csv").read_text())
    assert names[:2] == ["power_mw", "dip_center_nm"]
    slope = np.polyfit(cols[0], cols[1], 1)[0]
    assert slope < 0
    for p in ("1", "2", "3", "5"):
        assert (tmp_path / f"scan_power_{p}mw.csv").is_file()
    meta, names, cols = read_table((tmp_path / "speed_summary.csv").read_text())
    assert names == ["scan_speed_nm_per_s", "asymmetry_frac", "max_dev_lorentzian_frac"]
    assert np.all(np.diff(cols[2]) < 0) and cols[2][-1] < 0.01


def test_cavity_zero_beta_is_lorentzian(tmp_path):
    assert run(["cavity", "--beta", "0", "--powers", "1", "--speeds", "1",
                "--out", tmp_path, "-q"]) == 0
    meta, names, cols = read_table((tmp_path / "power_summary.csv").read_text())
    assert meta["lineshape"] == "lorentzian"
    assert abs(cols[names.index("asymmetry_frac")][0]) < 0.02


# fit

def test_fit_frequency_bundled(tmp_path):
    assert run(["fit", "frequency", "--out", tmp_path, "-q"]) == 0
    rep = json.loads((tmp_path / "fit.json").read_text())
    assert 0.20 <= rep["params"]["eta"] <= 0.26
    assert 270 <= rep["params"]["fs"] <= 350
    assert rep["data"].endswith("squeezing_vs_frequency.csv")
    meta, names, cols = read_table((tmp_path / "overlay.csv").read_text())
    assert names == ["frequency_mhz", "s_minus_db", "s_plus_db", "s_minus_fit_db", "s_plus_fit_db"]
    assert (tmp_path / "curve.csv").is_file()


def test_fit_frequency_fix(tmp_path, capsys):
    code, out, _ = run(["fit", "frequency", "--fix", "fs=310", "--out", tmp_path], capsys)
    assert code == 0 and "(fixed)" in out
    rep = json.loads((tmp_path / "fit.json").read_text())
    assert rep["params"]["fs"] == 310.0
    assert rep["fixed"] == ["fs"]
    assert rep["stderr"]["fs"] == 0.0


def test_fit_power_bundled(tmp_path):
    assert run(["fit", "power", "--out", tmp_path, "-q"]) == 0
    rep = json.loads((tmp_path / "fit.json").read_text())
    assert abs(rep["params"]["eta"] - 0.20) < 0.02
    assert abs(rep["params"]["p_th"] / 200 - 1) < 0.2


def test_fit_malformed_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("# synthetic=true\nfrequency_mhz,s_minus_db,s_plus_db\n"
                   "5,-0.46,0.75\n50,-0.40,0.70\n40,-0.35,0.66\n")
    code, _, err = run(["fit", "frequency", "--data", bad, "--out", tmp_path / "o"], capsys)
    assert code == 2
    assert "line 5" in err and "monotone x" in err
    assert not (tmp_path / "o" / "fit.json").exists()


def test_fit_lineshape_flat_exits_1(tmp_path, capsys):
    flat = tmp_path / "flat.csv"
    x = np.linspace(774.9, 775.1, 50)
    flat.write_text("wavelength_nm,transmission_frac\n" +
                    "".join(f"{v:.6f},1.0\n" for v in x))
    code, _, err = run(["fit", "lineshape", "--data", flat, "--out", tmp_path / "o"], capsys)
    assert code == 1
    assert "no resonance dip" in err


def test_fit_lineshape_roundtrip(tmp_path):
    assert run(["cavity", "--beta", "0", "--powers", "1", "--speeds", "1",
                "--out", tmp_path / "scan", "-q"]) == 0
    assert run(["fit", "lineshape", "--data", tmp_path / "scan" / "scan_power_1mw.csv",
                "--out", tmp_path / "fit", "-q"]) == 0
    rep = json.loads((tmp_path / "fit" / "fit.json").read_text())
    assert rep["derived"]["q_loaded"] == pytest.approx(7.1e4, rel=1e-3)


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[run]\nout = o\n\n[squeezer]\neta = 0.23\nratoi = 0.02\n")
    code, _, err = run(["opo", "squeeze", "--config", cfg], capsys)
    assert code == 2 and "ratoi" in err


def test_missing_config(tmp_path, capsys):
    code, _, err = run(["opo", "gain", "--config", tmp_path / "nope.ini"], capsys)
    assert code == 2


# modes

def test_modes_single_point(tmp_path):
    out = tmp_path / "m"
    assert run(["modes", "--widths", "1.0:1.0:1", "--h", "0.04", "--no-fields",
                "--out", out, "-q"]) == 0
    meta, names, cols = read_table((out / "neff_sweep.csv").read_text())
    assert names == ["top_width_um", "neff_TE0_1550nm_idx", "neff_TM2_775nm_idx"]
    assert len(cols[0]) == 1
    assert json.loads((out / "phasematch.json").read_text())


# determinism of every demo config

DEMO_RUNS = [
    ("cavity.ini", ["cavity"]),
    ("squeezer.ini", ["opo", "squeeze"]),
    ("squeezer.ini", ["opo", "budget"]),
    ("squeezer.ini", ["opo", "homodyne"]),
    ("fit_frequency.ini", ["fit", "frequency"]),
    pytest.param("modes_quick.ini", ["modes"], marks=pytest.mark.slow),
]


@pytest.mark.parametrize("config, argv", DEMO_RUNS)
def test_demo_config_reruns_byte_identical(tmp_path, config, argv):
    shutil.copy(DEMO_CONFIGS / config, tmp_path / config)
    first, second = tmp_path / "first", tmp_path / "second"
    assert run(argv + ["--config", tmp_path / config, "--out", first, "-q"]) == 0
    assert run(argv + ["--config", tmp_path / config, "--out", second, "-q"]) == 0
    a, b = snapshot(first), snapshot(second)
    assert a and a == b


def test_config_relative_out(tmp_path):
    shutil.copy(DEMO_CONFIGS / "squeezer.ini", tmp_path / "squeezer.ini")
    assert run(["opo", "squeeze", "--config", tmp_path / "squeezer.ini", "-q"]) == 0
    assert (tmp_path / "out" / "squeezer" / "squeeze.csv").is_file()


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sqzforge.cli", "opo", "project", "--eta",
                           "0.55", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "-3.468 dB" in proc.stdout
