import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from sqzforge.cavity import CavityParams, PhotorefractiveParams, scan_window, simulate_scan
from sqzforge.errors import ConfigurationError, ThresholdError, UnphysicalError
from sqzforge.opo import (EfficiencyBudget, SqueezerParams, budget_total, from_db, gain_envelopes,
                          gain_trace, homodyne_trace, infer_eta_x, infer_onchip, noise_power,
                          parametric_gain, project_threshold_limit, propagate_loss,
                          threshold_from_gain, to_db)
from sqzforge.trace import Trace

OPERATING = SqueezerParams.from_ratio(0.23, 0.02, 310.0)


def oracle_noise(eta, ratio, f, fs):
    # independent hand evaluation of the below-threshold spectrum
    x = math.sqrt(ratio)
    u = f / fs
    sm = 1 - eta * 4 * x / ((1 + x) ** 2 + u * u)
    sp = 1 + eta * 4 * x / ((1 - x) ** 2 + u * u)
    return sm, sp


# noise spectrum

def test_no_pump_is_shot_noise():
    n = noise_power(SqueezerParams(0.5, 10.0, 310.0, 0.0), [0.0, 5.0, 500.0])
    assert np.allclose(n.s_minus, 1.0) and np.allclose(n.s_plus, 1.0)
    assert np.allclose(n.minus_db, 0.0)


def test_operating_point_5mhz():
    n = noise_power(OPERATING, 5.0)
    sm, sp = oracle_noise(0.23, 0.02, 5.0, 310.0)
    assert n.s_minus == pytest.approx(sm, rel=1e-14)
    assert n.s_plus == pytest.approx(sp, rel=1e-14)
    assert n.s_minus == pytest.approx(0.900, abs=5e-4)
    assert n.s_plus == pytest.approx(1.177, abs=1e-3)
    assert n.minus_db == pytest.approx(-0.457, abs=1e-3)
    assert n.plus_db == pytest.approx(0.706, abs=1e-3)


def test_operating_point_325mhz():
    n = noise_power(OPERATING, 325.0)
    assert n.minus_db == pytest.approx(-0.242, abs=1e-3)
    assert n.plus_db == pytest.approx(0.297, abs=1e-3)


def test_at_threshold_raises():
    with pytest.raises(ThresholdError, match="threshold"):
        noise_power(SqueezerParams(0.2, 10.0, 310.0, 10.0), 5.0)


@pytest.mark.parametrize("kw", [dict(eta=0.0), dict(eta=1.2), dict(p_th=0.0), dict(fs=-1.0),
                                dict(pump_power=-1.0)])
def test_invalid_squeezer(kw):
    base = dict(eta=0.2, p_th=10.0, fs=310.0, pump_power=1.0)
    base.update(kw)
    with pytest.raises(ConfigurationError):
        SqueezerParams(**base)


@settings(max_examples=200, deadline=None)
@given(eta=st.floats(1e-3, 1.0), ratio=st.floats(1e-6, 0.999), f=st.floats(0.0, 2000.0),
       fs=st.floats(1.0, 1000.0))
def test_noise_bounds(eta, ratio, f, fs):
    n = noise_power(SqueezerParams.from_ratio(eta, ratio, fs), f)
    assert n.s_plus >= 1.0 >= n.s_minus
    assert n.s_minus > 1.0 - eta - 1e-15


def test_monotone_in_frequency():
    f = np.linspace(0.0, 1200.0, 61)
    n = noise_power(OPERATING, f)
    assert np.all(np.diff(n.s_plus - 1.0) < 0)
    assert np.all(np.diff(1.0 - n.s_minus) < 0)


# gain and threshold

def test_gain_no_pump():
    theta = np.linspace(0, np.pi, 7)
    assert np.allclose(parametric_gain(0.0, 50.0, theta), 1.0)


def test_gain_operating_point():
    x = math.sqrt(10 / 52.5)
    assert parametric_gain(10.0, 52.5, 0.0) == pytest.approx((1 - x) ** -2, rel=1e-14)
    assert parametric_gain(10.0, 52.5, 0.0) == pytest.approx(3.15, abs=0.01)
    assert parametric_gain(10.0, 52.5, np.pi / 2) == pytest.approx(0.484, abs=1e-3)


@settings(max_examples=100, deadline=None)
@given(pp=st.floats(1e-3, 100.0), scale=st.floats(1.001, 1e3))
def test_gain_identity_and_threshold_roundtrip(pp, scale):
    p_th = pp * scale
    gp, gm = gain_envelopes(pp, p_th)
    x2 = pp / p_th
    assert math.sqrt(gp * gm) == pytest.approx(1.0 / (1.0 - x2), rel=1e-12)
    est = threshold_from_gain(gp, pp, gm)
    assert est.p_th == pytest.approx(p_th, rel=1e-10)
    assert est.p_th_minus == pytest.approx(p_th, rel=1e-10)


def test_threshold_examples():
    est = threshold_from_gain(3.15, 10.0, 0.5)
    assert est.p_th == pytest.approx(52.47, abs=0.01)
    assert est.p_th_minus == pytest.approx(58.28, abs=0.01)
    assert est.spread == pytest.approx(abs(52.469 - 58.284) / 52.469, abs=1e-3)
    assert threshold_from_gain(4.0, 7.0).p_th == pytest.approx(28.0, rel=1e-14)
    assert threshold_from_gain(4.0, 7.0).spread is None


@pytest.mark.parametrize("args", [(1.0, 10.0), (0.5, 10.0), (3.0, 0.0), (3.0, 10.0, 1.2)])
def test_threshold_errors(args):
    with pytest.raises(ConfigurationError):
        threshold_from_gain(*args)


def test_gain_above_threshold():
    with pytest.raises(ThresholdError):
        parametric_gain(60.0, 52.5)


# efficiencies and loss

def test_budget_device_components():
    b = EfficiencyBudget(qe=0.85, vis2=0.98, opt=0.45, esc=0.55)
    assert budget_total(b) == pytest.approx(0.85 * 0.98 * 0.45 * 0.55, rel=1e-14)
    assert b.total == pytest.approx(0.206, abs=5e-4)
    assert b.external == pytest.approx(0.375, abs=5e-4)
    assert b.total_db == pytest.approx(10 * math.log10(b.total), rel=1e-14)


def test_budget_trivial_and_subfactors():
    assert EfficiencyBudget(1.0, 1.0, 1.0, 1.0).total == 1.0
    assert EfficiencyBudget(1.0, 0.5).total == 0.5
    b = EfficiencyBudget.from_mapping({"qe": "0.85", "vis2": 0.98, "gc_in": "-1.5dB",
                                       "gc_out": "-1.5 dB", "esc": 0.55})
    assert b.opt == pytest.approx(10 ** -0.3, rel=1e-12)
    with pytest.raises(ConfigurationError, match="multiply"):
        EfficiencyBudget(0.85, 0.98, opt=0.4, opt_factors={"a": 0.5, "b": 0.5})
    for bad in (0.0, 1.01, -0.1):
        with pytest.raises(ConfigurationError):
            EfficiencyBudget(bad, 1.0)
    with pytest.raises(ConfigurationError):
        EfficiencyBudget.from_mapping({"qe": "lots", "vis2": 1.0})
    with pytest.raises(ConfigurationError, match="missing"):
        EfficiencyBudget.from_mapping({"qe": 0.9})


def test_propagate_loss_examples():
    assert propagate_loss(0.3, 1.0) == pytest.approx(0.3)
    assert propagate_loss(0.3, 0.0) == pytest.approx(1.0)
    assert propagate_loss(0.5, 0.5) == pytest.approx(0.75)


@settings(max_examples=200, deadline=None)
@given(s=st.floats(1e-3, 100.0), e1=st.floats(0.0, 1.0), e2=st.floats(0.0, 1.0))
def test_propagate_loss_composition(s, e1, e2):
    assert propagate_loss(s, e1 * e2) == pytest.approx(
        propagate_loss(propagate_loss(s, e1), e2), abs=1e-12 * max(1.0, s))


def test_infer_onchip():
    s = from_db(-0.46)
    assert s == pytest.approx(0.8995, abs=1e-4)
    on = infer_onchip(s, 0.375)
    assert on == pytest.approx(0.732, abs=1e-3)
    assert to_db(on) == pytest.approx(-1.355, abs=1e-3)
    assert infer_onchip(0.8, 1.0) == pytest.approx(0.8)
    assert infer_onchip(1.0, 0.3) == pytest.approx(1.0)
    with pytest.raises(UnphysicalError, match="unphysical"):
        infer_onchip(0.5, 0.375)
    with pytest.raises(ConfigurationError):
        infer_onchip(0.9, 0.0)


def test_project_threshold_limit():
    assert to_db(project_threshold_limit(0.24)) == pytest.approx(-1.19, abs=5e-3)
    assert to_db(project_threshold_limit(0.55)) == pytest.approx(-3.47, abs=5e-3)
    assert project_threshold_limit(1.0) == 0.0
    assert to_db(project_threshold_limit(1.0)) == -math.inf
    # limit of the full formula as the pump approaches threshold
    near = noise_power(SqueezerParams.from_ratio(0.3, 1 - 1e-12, 310.0), 0.0).s_minus
    assert project_threshold_limit(0.3) == pytest.approx(near, abs=1e-5)
    with pytest.raises(ConfigurationError):
        project_threshold_limit(0.0)


# inversion

def test_infer_measured_pair():
    r = infer_eta_x(from_db(-0.46), from_db(0.75), 5.0, 310.0)
    assert r.eta == pytest.approx(0.215, abs=1e-3)
    assert r.x == pytest.approx(0.156, abs=1e-3)
    assert 0.20 <= r.eta <= 0.26


@pytest.mark.parametrize("s_minus", [0.2, 0.5, 0.9, 0.99])
def test_infer_pure_state(s_minus):
    r = infer_eta_x(s_minus, 1.0 / s_minus, 0.0, 310.0)
    assert r.eta == pytest.approx(1.0, abs=1e-10)


def test_infer_degenerate_flagged():
    r = infer_eta_x(1.0, 1.0, 5.0, 310.0)
    assert r.x == 0.0 and math.isnan(r.eta)
    assert "eta_unidentifiable" in r.flags


@pytest.mark.parametrize("sm, sp", [(1.1, 1.2), (0.9, 0.95), (0.5, 1.1), (0.9, 1.05)])
def test_infer_inconsistent(sm, sp):
    with pytest.raises(UnphysicalError):
        infer_eta_x(sm, sp, 5.0, 310.0)


@settings(max_examples=300, deadline=None)
@given(eta=st.floats(0.01, 1.0), ratio=st.floats(1e-4, 0.95), f=st.floats(0.0, 600.0),
       fs=st.floats(50.0, 1000.0))
def test_infer_roundtrip(eta, ratio, f, fs):
    n = noise_power(SqueezerParams.from_ratio(eta, ratio, fs), f)
    # x follows from (S+ - 1)/(1 - S-) - 1, so double rounding of S- costs
    # ~eps/(1 - S-)^2; keep to the region where 1e-10 is representable
    assume(1.0 - n.s_minus > 2e-3)
    r = infer_eta_x(n.s_minus, n.s_plus, f, fs)
    assert r.eta == pytest.approx(eta, abs=1e-10)
    assert r.x == pytest.approx(math.sqrt(ratio), abs=1e-10)


# synthetic traces

def test_homodyne_shot_noise_statistics():
    p = SqueezerParams(0.3, 10.0, 310.0, 0.0)
    tr = homodyne_trace(p, 5.0, duration=200.0, seed=3)
    expected = (1.0 / math.sqrt(1e6 / 100.0)) * 10.0 / math.log(10.0)
    assert abs(np.mean(tr.y)) < 0.1 * expected
    assert np.std(tr.y) == pytest.approx(expected, rel=0.1)


def test_homodyne_fringes_and_determinism():
    a = homodyne_trace(OPERATING, 5.0, duration=4.0, seed=11, rbw=1e12)
    b = homodyne_trace(OPERATING, 5.0, duration=4.0, seed=11, rbw=1e12)
    assert np.array_equal(a.y, b.y)
    assert a.y.min() == pytest.approx(-0.457, abs=2e-3)
    assert a.y.max() == pytest.approx(0.706, abs=2e-3)
    # LO at 0.5 Hz: anti-squeezing peaks every 1 s, squeezing floors in between
    for k in range(4):
        assert a.y[np.argmin(abs(a.x - k))] == pytest.approx(0.706, abs=2e-3)
        assert a.y[np.argmin(abs(a.x - k - 0.5))] == pytest.approx(-0.457, abs=2e-3)
    c = homodyne_trace(OPERATING, 5.0, duration=4.0, seed=12)
    assert not np.array_equal(a.y, c.y)


def test_homodyne_errors():
    with pytest.raises(ConfigurationError):
        homodyne_trace(OPERATING, 5.0, rbw=100.0, vbw=100.0)
    with pytest.raises(ConfigurationError):
        homodyne_trace(OPERATING, 5.0, duration=1.0)


def flat_buildup(level, n=400):
    x = np.linspace(775.0, 775.1, n)
    return Trace("wavelength_nm", x, np.full(n, level))


def test_gain_trace_no_pump():
    g = gain_trace(flat_buildup(0.0), 10.0, 52.5)
    assert np.allclose(g.y, 1.0)


def test_gain_trace_constant_buildup():
    g = gain_trace(flat_buildup(1.0, 4000), 0.19 * 52.5, 52.5)
    gp, gm = gain_envelopes(0.19 * 52.5, 52.5)
    assert np.all(g.y <= gp + 1e-12) and np.all(g.y >= gm - 1e-12)
    assert g.y.max() == pytest.approx(3.15, abs=0.01)
    assert g.y.min() == pytest.approx(0.48, abs=0.01)


def test_gain_trace_sharkfin_envelope():
    cav = CavityParams.from_q(775.0, 7.1e4, 0.55)
    pr = PhotorefractiveParams(17.4, 30.0)
    buildup = simulate_scan(cav, pr, 0.5, 1.0, scan_window(cav, pr, 1.0), output="buildup")
    g = gain_trace(buildup, 10.0, 52.5, ripple_rate=4000.0)
    x_loc = np.sqrt(10.0 * buildup.y / 52.5)
    assert np.all(g.y <= (1 - x_loc) ** -2 + 1e-12)
    assert np.all(g.y >= (1 + x_loc) ** -2 - 1e-12)
    # along the fin the buildup grows as the scan drags the resonance
    k = int(np.argmax(buildup.y))
    fin = (1 - x_loc[:k + 1]) ** -2
    assert np.all(np.diff(fin) >= -1e-12)
    assert fin[-1] > 3.0


def test_gain_trace_above_threshold():
    with pytest.raises(ThresholdError, match="above threshold"):
        gain_trace(flat_buildup(1.0), 60.0, 52.5)
    with pytest.raises(ConfigurationError):
        gain_trace(flat_buildup(-0.1), 10.0, 52.5)
