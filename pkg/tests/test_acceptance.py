"""Acceptance suite: one verdict line per criterion, printed in the terminal summary.

Gates that the implementation does not meet are kept at full strength and
marked ``xfail(strict=True)``; the reasons are recorded in the project notes.
"""
import time

import numpy as np
import pytest

from oracles import brute_force_form, heat_mms_error, lanczos_ritz_min, penalized_hum_terminal_norm
from thermistor.carleman import (WeightFamily, WeightParams, check_weight_inequalities,
                                 estimate_observability_constant, tau_star)
from thermistor.cli import EXIT_BASIN, main
from thermistor.control import (LinearizedOperators, assemble_variational, duality_residual,
                                large_time_control, liusternik_iterate, solve_adjoint,
                                solve_linear_control)
from thermistor.discretization import TimeGrid
from thermistor.model import ProblemData, constant_law, default_problem, zero_potential
from thermistor.simulator import energy_S, fit_decay_rate, solve_forward

N_CELLS, N_STEPS = 128, 256


def _l2(u, h):
    return float(np.sqrt(h * u @ u))


def _decoupled(scale=0.05):
    return ProblemData(kappa=constant_law(1.0), sigma=constant_law(1.0), zstar=zero_potential(),
                       y0=lambda x: scale * np.sin(np.pi * np.asarray(x, float)))


def _system(data, n_cells=N_CELLS, n_steps=N_STEPS, **kw):
    grid, tg = data.grid(n_cells), TimeGrid(data.T, n_steps)
    ops = LinearizedOperators.from_problem(data, grid, tg)
    return ops, assemble_variational(data, None, ops, **kw)


# --- 1 --------------------------------------------------------------------------------

def test_criterion_01_manufactured_convergence(record):
    start = time.perf_counter()
    space = np.log2(heat_mms_error(64, 64**2) / heat_mms_error(128, 128**2))
    temporal = np.log2(heat_mms_error(256, 32) / heat_mms_error(256, 64))
    elapsed = time.perf_counter() - start
    ok = space >= 1.9 and temporal >= 0.9 and elapsed < 10
    record(1, ok, f"space order {space:.3f}, time order {temporal:.3f}", elapsed)
    assert ok


# --- 2 --------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def stability():
    start = time.perf_counter()
    data = default_problem()
    fit = fit_decay_rate(energy_S(solve_forward(data, TimeGrid(1.0, N_STEPS), N_CELLS)), (0.2, 1.0))
    heat = _decoupled(1.0)
    heat_fit = fit_decay_rate(energy_S(solve_forward(heat, TimeGrid(1.0, N_STEPS), N_CELLS)),
                              (0.2, 1.0))
    return fit, heat_fit.rho_hat / (2 * np.pi**2), time.perf_counter() - start


def test_criterion_02_heat_limit_rate(stability):
    fit, heat_ratio, elapsed = stability
    assert fit.rho_hat > 0
    assert 0.95 <= heat_ratio <= 1.05
    assert elapsed < 5


@pytest.mark.xfail(strict=True, reason="default energy decay is not a single exponential on "
                                       "[0.2, 1]: the fit quality stays near 0.92")
def test_criterion_02_stability(stability, record):
    fit, heat_ratio, elapsed = stability
    ok = fit.rho_hat > 0 and fit.r2 > 0.95 and 0.95 <= heat_ratio <= 1.05 and elapsed < 5
    record(2, ok, f"rho_hat {fit.rho_hat:.3f}, r2 {fit.r2:.3f}, "
                  f"heat rate / 2 pi^2 = {heat_ratio:.4f}", elapsed)
    assert ok


# --- 3 --------------------------------------------------------------------------------

def test_criterion_03_weight_family(record):
    start = time.perf_counter()
    params = WeightParams.default()
    fam = WeightFamily(params)
    rng = np.random.default_rng(0)
    x, t = rng.uniform(0, 1, 1000), rng.uniform(1e-6, 1 - 1e-6, 1000)
    lhs = fam.alpha(x, t) * t * (1 - t) + np.exp(params.lam * params.eta0(x))
    identity = float(np.max(np.abs(lhs / np.exp(2 * params.lam * params.K) - 1)))
    e = fam.barred_extrema(rng.uniform(0, 1, 1000))
    chain = bool(np.all(4 * e["beta+"] < 5 * e["beta-"]) and
                 np.all(5 * e["beta-"] < 75 / 16 * e["beta+"]))
    report = check_weight_inequalities(params, n_time_samples=256)
    finite = all(np.isfinite(c.sup_log_ratio) for c in report.values())
    elapsed = time.perf_counter() - start
    ok = identity <= 1e-10 and chain and finite and elapsed < 1
    record(3, ok, f"identity error {identity:.1e}, chain {chain}, "
                  f"{len(report)} finite comparisons {finite}", elapsed)
    assert ok


# --- 4 --------------------------------------------------------------------------------

def test_criterion_04_tau_star(record):
    start = time.perf_counter()

    def reference(t1, t2):
        terms = [2 * t2 - t1 + 7, 1 - t1, 4 * t2 - 3 * t1 + 15, t2 + 7]
        best = terms[0]
        for term in terms[1:]:
            best = term if term > best else best
        return best

    cases = [(3, 3), (0, 0), (-20, -20)]
    got = [tau_star(*c) for c in cases]
    ok = got == [reference(*c) for c in cases] == [18, 15, 21]
    record(4, ok, f"tau* = {got}", time.perf_counter() - start)
    assert ok


# --- 5 --------------------------------------------------------------------------------

def _observability(n_cells, seed):
    data = default_problem()
    grid, tg = data.grid(n_cells), TimeGrid(1.0, N_STEPS)
    ops = LinearizedOperators.from_problem(data, grid, tg)
    est = estimate_observability_constant(lambda a, b: solve_adjoint(None, None, a, b, ops),
                                          grid.n_interior, grid.h, tg.dt,
                                          data.omega_mask(grid.interior), 50,
                                          np.random.default_rng(seed))
    return est


def test_criterion_05_observability(record):
    start = time.perf_counter()
    coarse, fine = _observability(64, 0), _observability(128, 0)
    elapsed = time.perf_counter() - start
    finite = all(len(e.ratios) == 50 and np.all(np.isfinite(e.ratios)) for e in (coarse, fine))
    spread = max(coarse.c_obs_max, fine.c_obs_max) / min(coarse.c_obs_max, fine.c_obs_max)
    ok = finite and spread <= 3 and elapsed < 60
    record(5, ok, f"max ratio {coarse.c_obs_max:.3e} (64) vs {fine.c_obs_max:.3e} (128)", elapsed)
    assert ok


# --- 6 --------------------------------------------------------------------------------

def test_criterion_06_linear_control(record):
    start = time.perf_counter()
    data = default_problem()
    ops, system = _system(data)
    x, h = ops.grid.interior, ops.grid.h
    y0, p0 = data.y0(x), data.p0(x)
    sol = solve_linear_control(None, None, y0, p0, system)
    rel = sum(sol.terminal_norms()) / (_l2(y0, h) + _l2(p0, h))
    d = sol.diagnostics
    costs = all(np.isfinite(d[k]) for k in ("state_cost", "control_cost"))
    cg_ok = d["cg_rel_residual"] <= 1e-10 or d["cg_at_floor"]

    heat = _decoupled()
    hops, hsys = _system(heat)
    hy0 = heat.y0(x)
    ours = solve_linear_control(None, None, hy0, np.zeros_like(hy0), hsys).terminal_norms()[0]
    hum, _ = penalized_hum_terminal_norm(hy0, 1.0, hops.grid, hops.tgrid, heat.omega_mask(x))
    factor = max(ours / hum, hum / ours)
    elapsed = time.perf_counter() - start
    ok = rel <= 1e-3 and costs and cg_ok and factor <= 10 and elapsed < 300
    record(6, ok, f"terminal relative {rel:.2e}, CG residual {d['cg_rel_residual']:.1e}"
                  f"{' (rounding floor)' if d['cg_at_floor'] else ''}, HUM factor {factor:.2f}",
           elapsed)
    assert ok


# --- 7 --------------------------------------------------------------------------------

def test_criterion_07_assembly_oracle(record):
    start = time.perf_counter()
    data = _decoupled(0.0)
    grid, tg = data.grid(8), TimeGrid(1.0, 8)
    chi = data.omega_mask(grid.interior).astype(float)
    ops = LinearizedOperators.from_problem(data, grid, tg, chi=chi)
    A = assemble_variational(data, None, ops, unit_weights=True).A.toarray()
    ref = brute_force_form(8, 8, 1.0, 1.0, 1.0, chi)
    oracle = float(np.max(np.abs(A - ref)) / np.max(np.abs(ref)))
    sym = 0.0
    for n_cells, n_steps in ((8, 8), (16, 16), (N_CELLS, N_STEPS)):
        S = _system(default_problem(), n_cells, n_steps)[1].A
        sym = max(sym, abs(S - S.T).max() / abs(S).max())
    ritz = lanczos_ritz_min(_system(default_problem(), 16, 16)[1].A.toarray(), steps=50)
    elapsed = time.perf_counter() - start
    ok = oracle <= 1e-12 and sym <= 1e-12 and ritz > 0
    record(7, ok, f"oracle gap {oracle:.1e}, asymmetry {sym:.1e}, Ritz min {ritz:.3e}", elapsed)
    assert ok


# --- 8 --------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def nonlinear():
    start = time.perf_counter()
    data = default_problem(scale=0.05)
    sol = liusternik_iterate(data)
    x, h = sol.grid.interior, sol.grid.h
    init = _l2(data.y0(x), h) + _l2(data.p0(x), h)
    h_ = sol.history
    factors = [h_[k] / h_[k + 1] for k in range(min(4, len(h_) - 1))]
    rel = sum(sol.terminal_norms()) / init

    heat = _decoupled()
    red = liusternik_iterate(heat)
    ops, system = _system(heat)
    lin = solve_linear_control(None, None, heat.y0(ops.grid.interior), np.zeros(ops.m), system)
    gap = abs(red.terminal_norms()[0] - lin.terminal_norms()[0]) + abs(red.terminal_norms()[1]
                                                                        - lin.terminal_norms()[1])
    return factors, rel, gap, time.perf_counter() - start


def test_criterion_08_linear_reduction(nonlinear):
    _, _, gap, elapsed = nonlinear
    assert gap <= 1e-10
    assert elapsed < 900


@pytest.mark.xfail(strict=True, reason="the first Liusternik step contracts by about 1.7 and the "
                                       "re-simulated potential keeps about 6 percent of its size")
def test_criterion_08_nonlinear_control(nonlinear, record):
    factors, rel, gap, elapsed = nonlinear
    contraction = len(factors) == 4 and min(factors) >= 2
    ok = contraction and rel <= 1e-3 and gap <= 1e-10 and elapsed < 900
    record(8, ok, f"contraction factors {', '.join(f'{f:.2f}' for f in factors)}, "
                  f"terminal relative {rel:.2e}, reduction gap {gap:.1e}", elapsed)
    assert ok


# --- 9 --------------------------------------------------------------------------------

def test_criterion_09_large_time(tmp_path, record):
    start = time.perf_counter()
    data = default_problem(scale=0.3, T=6.0)
    sol = large_time_control(data, T0=1.0, T=6.0, n_cells=N_CELLS, steps_per_unit=N_STEPS)
    x, h = sol.grid.interior, sol.grid.h
    init = _l2(data.y0(x), h) + _l2(data.p0(x), h)
    rel = (_l2(sol.y_sim[-1], h) + _l2(sol.p_sim[-1], h)) / init
    success = sol.diagnostics["achieved"] < 1e-3 and rel <= 1e-3

    cfg = tmp_path / "big.ini"
    cfg.write_text("[run]\nscenario = large-time\n[problem]\nscale = 10\n"
                   "[large_time]\nT0 = 1\nT_total = 2\n")
    code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
    failure = (tmp_path / "out" / "large_time_failure.csv").read_text().splitlines()
    t_bar = float(failure[1].split(",")[2])
    elapsed = time.perf_counter() - start
    ok = success and code == EXIT_BASIN and t_bar > 1.0 and elapsed < 600
    record(9, ok, f"scale 0.3 terminal relative {rel:.2e} after wait measure "
                  f"{sol.diagnostics['achieved']:.1e}; scale 10 exit {code}, "
                  f"minimal wait {t_bar:.2f}", elapsed)
    assert ok


# --- 10 -------------------------------------------------------------------------------

def test_criterion_10_duality(record):
    start = time.perf_counter()
    data = default_problem()
    grid, tg = data.grid(32), TimeGrid(1.0, 64)
    ops = LinearizedOperators.from_problem(data, grid, tg)
    h, dt = grid.h, tg.dt
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        shape = (ops.N + 1, ops.m)
        y0, p0, phiT, psiT = (rng.normal(size=ops.m) for _ in range(4))
        f, g, v, F, G = (rng.normal(size=shape) for _ in range(5))
        res = duality_residual(ops, y0, p0, f, g, v, F, G, phiT, psiT)
        forward = _l2(np.concatenate([y0, p0]), h) + np.sqrt(dt * h * np.sum(f**2 + g**2 + v**2))
        backward = _l2(np.concatenate([phiT, psiT]), h) + np.sqrt(dt * h * np.sum(F**2 + G**2))
        worst = max(worst, abs(res["residual"]) / (dt * forward * backward))
    elapsed = time.perf_counter() - start
    ok = worst <= 10 and elapsed < 10
    record(10, ok, f"max residual / (dt * data norms) = {worst:.2e} over 20 draws", elapsed)
    assert ok
