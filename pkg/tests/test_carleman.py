import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermistor.carleman import (LOG2, RHO_NAMES, WeightFamily, WeightParams, build_eta0,
                                 carleman_integral, check_weight_inequalities,
                                 check_window_condition, eval_weights, smoothstep, tau_star,
                                 weight_profile)
from thermistor.discretization import Grid1D


@pytest.fixture(scope="module")
def params():
    return WeightParams.default()


@pytest.fixture(scope="module")
def family(params):
    return WeightFamily(params)


@pytest.mark.parametrize("taus, expected", [((3, 3), 18), ((0, 0), 15), ((-20, -20), 21)])
def test_tau_star_values(taus, expected):
    assert tau_star(*taus) == expected


def test_eta0_values_and_slope():
    eta = build_eta0((0.0, 1.0), (0.7, 1.0))
    assert eta(1.0) == 2.0 and eta(0.0) == 1.0
    x = np.linspace(0, 0.7, 701)
    assert np.min(np.abs(eta.grad(x))) == pytest.approx(0.6)
    xx = np.linspace(0, 1, 1001)
    assert np.min(eta(xx)) == pytest.approx(1.0) and np.max(eta(xx)) == pytest.approx(2.0)
    assert eta.sup == 2.0 and eta.inf == 1.0


def test_eta0_rejects_left_region():
    with pytest.raises(ValueError):
        build_eta0((0.0, 1.0), (0.0, 0.3))


def test_params_constraints():
    eta = build_eta0()
    with pytest.raises(ValueError, match="K"):
        WeightParams(0.2, 3.0, eta.sup, 3, 3, 1.0, eta)
    with pytest.raises(ValueError, match="tau"):
        WeightParams(0.2, 3.0, eta.sup + 2 * LOG2, 3, 4, 1.0, eta)
    with pytest.raises(ValueError, match="s0"):
        WeightParams(0.2, 1.0, eta.sup + 2 * LOG2, 3, 3, 1.0, eta)


def test_default_params(params):
    assert params.K == pytest.approx(2 + 2 * np.log(2))
    assert params.s == pytest.approx(1.5 * params.s0) and params.s0 == 2.0
    assert params.tau_star == 18


def test_defining_identity_at_random_points(params, family):
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, 1000)
    t = rng.uniform(1e-3, 1 - 1e-3, 1000)
    lhs = family.alpha(x, t) * t * (1 - t) + np.exp(params.lam * params.eta0(x))
    np.testing.assert_allclose(lhs, np.exp(2 * params.lam * params.K), rtol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.5, 0.9999))
def test_barred_weights_match_on_second_half(x, t):
    fam = WeightFamily(WeightParams.default())
    assert fam.alpha_bar(x, t) == pytest.approx(fam.alpha(x, t), rel=1e-12)
    assert fam.xi_bar(x, t) == pytest.approx(fam.xi(x, t), rel=1e-12)


def test_midpoint_blend(family):
    assert family.m(0.5) == pytest.approx(0.25, rel=1e-15)
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(family.xi(x, 0.5), family.xi_bar(x, 0.5), rtol=1e-14)


def test_blend_smooth_and_bounded(family):
    t = np.linspace(0, 0.5, 5001)
    assert np.all(family.m(t) >= 1 / 8 - 1e-15)
    for joint in (0.3, 0.5):
        d = 1e-7
        left = (family.m(joint) - family.m(joint - d)) / d
        right = (family.m(joint + d) - family.m(joint)) / d
        assert abs(left - right) < 1e-6


def test_smoothstep_limits():
    u = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])
    np.testing.assert_allclose(smoothstep(u), [0, 0, 0.5, 1, 1])


def test_extrema_closed_form():
    eta = build_eta0()
    K = 2 + 2 * np.log(2)
    fam = WeightFamily(WeightParams(1.0, 3.0, K, 3, 3, 1.0, eta))
    e = fam.extrema(0.5)
    assert e["alpha-"] == pytest.approx(4 * (np.exp(2 * K) - np.exp(2)), rel=1e-14)
    assert e["alpha+"] == pytest.approx(4 * (np.exp(2 * K) - np.e), rel=1e-14)


@pytest.mark.parametrize("lam", [1.0, 2.0, 3.0])
def test_alpha_hat_bar_positive_for_large_lambda(lam):
    fam = WeightFamily(WeightParams.default(lam=lam))
    t = np.linspace(0, 1, 4001)[:-1]
    assert np.all(fam.barred_extrema(t)["alpha_hat_bar"] > 0)


def test_extrema_bound_pointwise(family):
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (200, 1))
    t = rng.uniform(0.01, 0.99, (1, 50))
    e = family.extrema(t)
    a, xi = family.alpha(x, t), family.xi(x, t)
    assert np.all(e["alpha-"] <= a * (1 + 1e-14)) and np.all(a <= e["alpha+"] * (1 + 1e-14))
    assert np.all(e["xi-"] <= xi * (1 + 1e-14)) and np.all(xi <= e["xi+"] * (1 + 1e-14))
    assert np.all(a > 0) and np.all(xi > 0)


def test_monotone_in_eta0(family):
    x = np.linspace(0, 1, 101)
    # eta0 increases on [0, 1], so xi increases and alpha decreases along x
    assert np.all(np.diff(family.xi(x, 0.4)) > 0)
    assert np.all(np.diff(family.alpha(x, 0.4)) < 0)


def test_unbarred_rejects_endpoints(family):
    with pytest.raises(ValueError):
        family.alpha(0.5, 0.0)
    with pytest.raises(ValueError):
        family.xi(0.5, 1.0)
    with pytest.raises(ValueError):
        family.alpha_bar(0.5, 1.0)
    assert np.isfinite(family.alpha_bar(0.5, 0.0))


def test_ordering_chain_at_default_lambda(family):
    t = np.random.default_rng(2).uniform(0, 1, 1000)
    e = family.barred_extrema(t)
    assert np.all(4 * e["beta+"] < 5 * e["beta-"])
    assert np.all(5 * e["beta-"] < 75 / 16 * e["beta+"])


def test_ordering_chain_breaks_for_large_lambda():
    # the chain is independent of s and t; it needs exp(2 lam K) < 16 e^{2 lam} - 15 e^{lam}
    fam = WeightFamily(WeightParams.default(lam=2.0))
    e = fam.barred_extrema(0.5)
    assert not 5 * e["beta-"] < 75 / 16 * e["beta+"]


def test_weight_comparisons_pass(params):
    report = check_weight_inequalities(params, n_time_samples=256)
    assert "rho2<=Crho1" in report and "rho3*rho3_t<=Crho2^2" in report
    for name, check in report.items():
        assert check.passed, name
        assert np.isfinite(check.sup_log_ratio), name


def test_weight_comparisons_need_samples(params):
    with pytest.raises(ValueError):
        check_weight_inequalities(params, n_time_samples=8)


def test_log_weights_finite_and_growing_near_horizon(family):
    n_steps = 256
    t = np.linspace(0, 1, n_steps + 1)[:-1]
    lw = family.log_weights(t)
    for name in RHO_NAMES:
        assert np.all(np.isfinite(lw[name])), name
    last = t >= 0.9
    for k in range(2, 7):
        assert np.all(np.diff(lw[f"rho{k}"][last]) > 0)


def test_log_table_marks_horizon(family):
    table = family.log_weight_table(np.array([0.0, 0.5, 1.0]))
    assert np.isinf(table["rho2"][-1]) and np.isfinite(table["rho2"][0])


def test_clamped_exponential_never_overflows(family):
    with np.errstate(over="raise"):
        vals = family.exp_clamped(np.array([-1e6, 0.0, 1e6]))
    assert np.all(np.isfinite(vals)) and vals[1] == 1.0


def test_eval_weights_contents(params):
    sample = eval_weights(params, 0.4, 0.3)
    for key in ("m", "alpha", "xi", "alpha_bar", "xi_bar", "beta+", "beta-", "alpha_hat_bar"):
        assert np.isfinite(sample[key])
    for name in RHO_NAMES:
        assert np.isfinite(sample[f"log_{name}"])
    with pytest.raises(ValueError):
        eval_weights(params, 0.4, 0.0)
    assert "alpha" not in eval_weights(params, 0.4, 0.0, barred_only=True).values


def test_window_condition_report(params):
    res = check_window_condition(params, 0.25, 0.75, np.linspace(0, 1, 21))
    assert set(res) == {(3.0, a) for a in (-2, 0, 2, 4)}
    assert all(np.isfinite(v) for v in res.values())


def test_carleman_integral_positive_and_quadratic(params):
    grid = Grid1D(32)
    times = np.linspace(0, 1, 65)
    phi = np.outer(1 + times, np.sin(np.pi * grid.interior))
    val = carleman_integral(params, 3.0, phi, grid, times)
    assert val > 0 and np.isfinite(val)
    assert carleman_integral(params, 3.0, 2 * phi, grid, times) == pytest.approx(4 * val, rel=1e-12)


def test_weight_profile_columns(params):
    prof = weight_profile(params, np.linspace(0, 1, 5))
    assert list(prof) == ["t"] + [f"log_{n}" for n in RHO_NAMES]
