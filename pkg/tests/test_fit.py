import json
import math
import warnings

import numpy as np
import pytest

from sqzforge import fit
from sqzforge.errors import ConfigurationError
from sqzforge.fit import (MODELS, FitProblem, Model, fit_squeezing_vs_frequency,
                          fit_squeezing_vs_power, in_db, least_squares, linear_model,
                          model_curve, numeric_jacobian, require_converged,
                          squeeze_frequency_model, squeeze_power_model)
from sqzforge.opo import SqueezerParams, from_db, noise_power


def power_data(eta=0.20, p_th=200.0, fs=310.0, f=5.0, pp=None):
    pp = np.linspace(1.0, 40.0, 21) if pp is None else np.asarray(pp, dtype=float)
    sm = np.array([noise_power(SqueezerParams(eta, p_th, fs, p), f).s_minus for p in pp])
    sp = np.array([noise_power(SqueezerParams(eta, p_th, fs, p), f).s_plus for p in pp])
    return pp, sm, sp


def freq_data(eta=0.23, ratio=0.02, fs=310.0, f=None):
    f = np.linspace(5.0, 605.0, 21) if f is None else np.asarray(f, dtype=float)
    n = noise_power(SqueezerParams.from_ratio(eta, ratio, fs), f)
    return f, n.s_minus, n.s_plus


# engine

def test_linear_exact():
    x = np.linspace(-3, 5, 11)
    res = least_squares(FitProblem(linear_model(), x, 2.5 * x - 0.75, [0.0, 0.0]))
    assert res.converged
    assert res.iterations <= 3
    assert np.allclose(res.params, [2.5, -0.75], atol=1e-12)


def test_rosenbrock():
    # residuals (10 (p1 - p0^2), 1 - p0) from the classic start (-1.2, 1)
    m = Model("rosenbrock", ("a", "b"),
              lambda p, x: np.array([10.0 * (p[1] - p[0] ** 2), 1.0 - p[0]]),
              lambda p, x: np.array([[-20.0 * p[0], 10.0], [-1.0, 0.0]]))
    res = least_squares(FitProblem(m, [0.0, 1.0], [0.0, 0.0], [-1.2, 1.0]))
    assert res.converged
    assert np.allclose(res.params, [1.0, 1.0], atol=1e-8)
    hist = np.array(res.cost_history)
    assert np.all(np.diff(hist) <= 0)


def test_rosenbrock_numeric_jacobian():
    m = Model("rosenbrock", ("a", "b"),
              lambda p, x: np.array([10.0 * (p[1] - p[0] ** 2), 1.0 - p[0]]))
    res = least_squares(FitProblem(m, [0.0, 1.0], [0.0, 0.0], [-1.2, 1.0]))
    assert res.converged and np.allclose(res.params, [1.0, 1.0], atol=1e-6)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_gradient_check(name):
    factory, sample = MODELS[name]
    model = factory()
    rng = np.random.default_rng(2024)
    for _ in range(20):
        p, x = sample(rng)
        ja = model.jac(p, x)
        jn = numeric_jacobian(model, p, x)
        # relative to each column's scale; entries near zero carry only FD rounding
        scale = np.max(np.abs(ja), axis=0)
        assert np.max(np.abs(ja - jn) / scale) < 1e-6, name


def test_gradient_check_db_wrappers():
    rng = np.random.default_rng(7)
    for factory, sample in (MODELS["squeeze_power"], MODELS["squeeze_frequency"]):
        model = in_db(factory())
        for _ in range(10):
            p, x = sample(rng)
            ja, jn = model.jac(p, x), numeric_jacobian(model, p, x)
            assert np.max(np.abs(ja - jn)) < 1e-6 * np.max(np.abs(ja))


def test_numeric_jacobian_trivial():
    x = np.linspace(0, 4, 9)
    j = numeric_jacobian(lambda p, x: p[0] * x, [3.0], x)
    assert np.allclose(j[:, 0], x, atol=1e-10)
    j = numeric_jacobian(lambda p, x: np.full_like(x, 2.0), [1.0, 5.0], x)
    assert np.all(j == 0.0)
    with np.errstate(invalid="ignore", divide="ignore"), \
            pytest.raises(ConfigurationError, match="parameter 0"):
        numeric_jacobian(lambda p, x: np.log(p[0]) * x, [0.0], x)


def test_order_invariance(rng):
    pp, sm, sp = power_data()
    sm = sm * (1 + 0.003 * rng.standard_normal(sm.size))
    sp = sp * (1 + 0.003 * rng.standard_normal(sp.size))
    a = fit_squeezing_vs_power(pp, sm, sp, f=5.0, fs=310.0)
    perm = rng.permutation(len(pp))
    b = fit_squeezing_vs_power(pp[perm], sm[perm], sp[perm], f=5.0, fs=310.0)
    assert np.allclose(a.params, b.params, rtol=1e-10, atol=0)


def test_stderr_scales_with_replication(rng):
    x = np.linspace(0, 1, 40)
    y = 1.5 * x + 0.2 + 0.05 * rng.standard_normal(x.size)
    one = least_squares(FitProblem(linear_model(), x, y, [0.0, 0.0]))
    four = least_squares(FitProblem(linear_model(), np.tile(x, 4), np.tile(y, 4), [0.0, 0.0]))
    assert np.all(np.diag(one.covariance) > 0)
    # s^2 uses N - p degrees of freedom: ratio is sqrt((N - p) / (4N - p))
    expected = math.sqrt((40 - 2) / (160 - 2))
    assert np.allclose(four.stderr / one.stderr, expected, rtol=1e-8)
    assert np.allclose(four.stderr / one.stderr, 0.5, rtol=0.03)


def test_covariance_symmetric_psd(rng):
    f, sm, sp = freq_data()
    res = fit_squeezing_vs_frequency(f, sm * (1 + 0.005 * rng.standard_normal(sm.size)),
                                     sp * (1 + 0.005 * rng.standard_normal(sp.size)))
    c = res.covariance
    assert np.allclose(c, c.T)
    assert np.all(np.linalg.eigvalsh(c) > -1e-15 * np.max(np.abs(c)))


def test_nan_at_start_names_parameters():
    m = Model("bad", ("a",), lambda p, x: np.sqrt(p[0] - 2.0) * x)
    with np.errstate(invalid="ignore"), pytest.raises(ConfigurationError, match=r"\[1\.0\]"):
        least_squares(FitProblem(m, [1.0, 2.0], [1.0, 2.0], [1.0]))


def test_nan_during_search_is_rejected_step():
    # sqrt model is undefined below zero; the engine backs off and still converges
    m = Model("sqrt", ("a",), lambda p, x: np.sqrt(p[0]) * x)
    with np.errstate(invalid="ignore"):
        res = least_squares(FitProblem(m, [1.0, 2.0, 3.0], [0.1, 0.2, 0.3], [4.0]))
    assert res.converged
    assert res.params[0] == pytest.approx(0.01, rel=1e-8)


def test_singular_problem_does_not_crash():
    # two parameters that only enter as a sum
    m = Model("sum", ("a", "b"), lambda p, x: (p[0] + p[1]) * x,
              lambda p, x: np.column_stack([x, x]))
    res = least_squares(FitProblem(m, [1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0]))
    assert res.params[0] + res.params[1] == pytest.approx(2.0, rel=1e-10)
    assert "singular_covariance" in res.flags


def test_problem_validation():
    m = linear_model()
    with pytest.raises(ConfigurationError):
        FitProblem(m, [1, 2, 3], [1, 2], [0, 0])
    with pytest.raises(ConfigurationError):
        FitProblem(m, [1, 2], [1, 2], [0, 0, 0])
    with pytest.raises(ConfigurationError):
        FitProblem(m, [1, 2], [1, 2], [0, 0], sigma=[1.0, 0.0])
    with pytest.raises(ConfigurationError):
        FitProblem(m, [1, 2], [1, 2], [5, 0], bounds=((0, 0), (1, 1)))
    with pytest.raises(ConfigurationError):
        FitProblem(m, [1], [1], [0, 0])
    with pytest.raises(ConfigurationError, match="unknown"):
        FitProblem(m, [1, 2], [1, 2], [0, 0], fixed=("gain",))


def test_fixed_and_bounds():
    x = np.linspace(0, 1, 10)
    res = least_squares(FitProblem(linear_model(), x, 2 * x + 1, [0.0, 0.5], fixed=("intercept",)))
    assert res["intercept"] == 0.5
    assert res.error("intercept") == 0.0
    res = least_squares(FitProblem(linear_model(), x, 2 * x + 1, [0.0, 0.0],
                                   bounds=((-1, -1), (1.5, 5))))
    assert res["slope"] <= 1.5


def test_observer_receives_every_run():
    seen = []
    fit.add_observer(seen.append)
    try:
        x = np.arange(5.0)
        least_squares(FitProblem(linear_model(), x, x, [0.0, 0.0]))
    finally:
        fit.remove_observer(seen.append)
    assert len(seen) == 1 and seen[0].model == "linear"


def test_json_schema():
    x = np.arange(6.0)
    res = least_squares(FitProblem(linear_model(), x, 3 * x, [0.0, 1.0]))
    d = json.loads(res.to_json())
    assert d["schema"] == "sqzforge.fitresult/1"
    assert set(d) >= {"model", "param_order", "params", "stderr", "covariance", "fixed",
                      "residual_norm", "iterations", "nfev", "converged", "reason", "flags",
                      "n_points", "dof"}
    assert d["param_order"] == ["slope", "intercept"]
    assert d["dof"] == 4
    assert res.to_json() == res.to_json()


# squeezing fits

def test_power_fit_noiseless():
    pp, sm, sp = power_data()
    res = fit_squeezing_vs_power(pp, sm, sp, f=5.0, fs=310.0)
    assert res.converged
    assert res["eta"] == pytest.approx(0.20, abs=1e-8)
    assert res["p_th"] == pytest.approx(200.0, rel=1e-8)
    assert res["fs"] == 310.0 and "fs" in res.fixed


def test_power_fit_seeded_noise():
    pp, sm, sp = power_data(pp=np.linspace(2.0, 40.0, 21))
    rng = np.random.default_rng(99)
    res = require_converged(fit_squeezing_vs_power(
        pp, sm + 0.02 * rng.standard_normal(sm.size), sp + 0.02 * rng.standard_normal(sp.size),
        f=5.0, fs=310.0))
    assert abs(res["eta"] - 0.20) <= 0.02
    assert abs(res["p_th"] / 200.0 - 1.0) <= 0.20


def test_power_fit_anchored_points():
    # measured anchors plus fill generated from the fitted operating point
    pp, sm, sp = power_data(pp=[1.0, 2.0, 3.0, 5.0, 8.0])
    pp = np.concatenate([pp, [4.0, 6.9]])
    sm = np.concatenate([sm, from_db(np.array([-0.34, -0.46]))])
    sp = np.concatenate([sp, from_db(np.array([0.55, 0.75]))])
    order = np.argsort(pp)
    res = fit_squeezing_vs_power(pp[order], sm[order], sp[order], f=5.0, fs=310.0)
    assert res.converged
    assert 0.18 <= res["eta"] <= 0.26
    assert 120.0 <= res["p_th"] <= 300.0


def test_power_fit_flags():
    pp, sm, sp = power_data()
    with pytest.warns(UserWarning, match="single-branch"):
        res = fit_squeezing_vs_power(pp, sm, None, f=5.0, fs=310.0)
    assert "single_branch" in res.flags
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        flat = fit_squeezing_vs_power(pp, np.ones_like(pp), np.ones_like(pp), f=5.0, fs=310.0)
    assert "eta_unidentifiable" in flat.flags
    with pytest.raises(ConfigurationError):
        fit_squeezing_vs_power(pp, sm[:-1], sp, f=5.0, fs=310.0)
    with pytest.raises(ConfigurationError):
        fit_squeezing_vs_power(pp, None, None, f=5.0, fs=310.0)


def test_power_fit_db_domain():
    pp, sm, sp = power_data()
    res = fit_squeezing_vs_power(pp, sm, sp, f=5.0, fs=310.0, domain="db")
    assert res["eta"] == pytest.approx(0.20, abs=1e-7)
    with pytest.raises(ConfigurationError):
        fit_squeezing_vs_power(pp, sm, sp, f=5.0, fs=310.0, domain="log")


def test_frequency_fit_noiseless():
    f, sm, sp = freq_data()
    res = fit_squeezing_vs_frequency(f, sm, sp)
    assert res.converged
    assert np.allclose(res.params, [0.23, 0.02, 310.0], rtol=1e-7)


def test_frequency_fit_seeded_noise():
    f, sm, sp = freq_data()
    rng = np.random.default_rng(5)
    res = fit_squeezing_vs_frequency(f, sm * (1 + 0.005 * rng.standard_normal(sm.size)),
                                     sp * (1 + 0.005 * rng.standard_normal(sp.size)))
    assert abs(res["eta"] - 0.23) <= 0.03
    assert abs(res["ratio"] - 0.02) <= 0.01
    assert abs(res["fs"] - 310.0) <= 40.0
    at5 = model_curve(res, np.array([[5.0, -1.0]]))[0]
    assert 10 * math.log10(at5) == pytest.approx(-0.46, abs=0.05)


def test_frequency_fit_fix():
    f, sm, sp = freq_data()
    rng = np.random.default_rng(5)
    res = fit_squeezing_vs_frequency(f, sm * (1 + 0.005 * rng.standard_normal(sm.size)),
                                     sp * (1 + 0.005 * rng.standard_normal(sp.size)),
                                     fix={"fs": 310.0})
    assert res["fs"] == 310.0 and res.fixed == ("fs",)
    assert res.covariance[2, 2] == 0.0
    with pytest.raises(ConfigurationError, match="unknown"):
        fit_squeezing_vs_frequency(f, sm, sp, fix={"bandwidth": 310.0})


def test_frequency_fit_lower_bound_flag():
    f, sm, sp = freq_data(f=np.linspace(1.0, 20.0, 12))
    res = fit_squeezing_vs_frequency(f, sm, sp)
    assert "fs_lower_bound_only" in res.flags


def test_frequency_fit_degenerate():
    f = np.linspace(5, 100, 8)
    res = fit_squeezing_vs_frequency(f, np.ones_like(f), np.ones_like(f))
    assert "eta_unidentifiable" in res.flags


def test_model_curve_layout():
    pp, sm, sp = power_data()
    res = fit_squeezing_vs_power(pp, sm, sp, f=5.0, fs=310.0)
    x = np.column_stack([pp, -np.ones_like(pp), np.full_like(pp, 5.0)])
    assert np.allclose(model_curve(res, x), sm, rtol=1e-9)
    assert np.allclose(squeeze_power_model()(res.params, x), sm, rtol=1e-9)
    assert squeeze_frequency_model().param_names == ("eta", "ratio", "fs")
