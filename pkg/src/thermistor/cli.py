"""Command-line runner: INI configuration, scenario orchestration and CSV output.

Exit codes: 0 success, 2 invalid configuration or failed validation,
3 solver non-convergence, 4 outside the local basin, 5 I/O error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .carleman import WeightFamily, WeightParams, estimate_observability_constant, tau_star, weight_profile
from .control import (ControlError, LOG_WEIGHT_CAP, LinearizedOperators, OutsideBasinError,
                      SolverNonConvergence, assemble_variational, large_time_control,
                      liusternik_iterate, solve_adjoint, solve_linear_control)
from .discretization import TimeGrid
from .model import (BOUNDARY_TOL, ProblemData, constant_law, quadratic_potential, tanh_law,
                    validate_hypotheses, zero_potential)
from .simulator import NonFiniteStateError, energy_S, fit_decay_rate, solve_forward

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_BASIN, EXIT_IO = 0, 2, 3, 4, 5
SCENARIOS = ("simulate", "stability", "observability", "linear-control", "nonlinear-control",
             "large-time")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: type
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    rule: str = ""
    choices: tuple = ()


def _num(kind, default, lo=None, hi=None, lo_open=False, hi_open=False):
    parts = []
    if lo is not None:
        parts.append(f"{'>' if lo_open else '>='} {lo:g}")
    if hi is not None:
        parts.append(f"{'<' if hi_open else '<='} {hi:g}")

    def check(v):
        ok = True
        if lo is not None:
            ok &= v > lo if lo_open else v >= lo
        if hi is not None:
            ok &= v < hi if hi_open else v <= hi
        return bool(ok)

    return Key(kind, default, check, " and ".join(parts))


def _choice(default, *choices):
    return Key(str, default, lambda v: v in choices, "one of " + ", ".join(choices), choices)


SCHEMA = {
    "run": {
        "scenario": _choice(None, *SCENARIOS),
        "seed": _num(int, 0, 0, 2**64 - 1),
    },
    "problem": {
        "T": _num(float, 1.0, 0, 100, lo_open=True),
        "x_lo": _num(float, 0.0),
        "x_hi": _num(float, 1.0),
        "omega_lo": _num(float, 0.7),
        "omega_hi": _num(float, 1.0),
        "kappa_law": _choice("tanh", "tanh", "constant"),
        "kappa_base": _num(float, 1.0, 0, None, lo_open=True),
        "kappa_amp": _num(float, 0.25, -10, 10),
        "kappa_lower": _num(float, 0.5, 0, None, lo_open=True),
        "kappa_upper": _num(float, 2.0, 0, None, lo_open=True),
        "sigma_law": _choice("tanh", "tanh", "constant"),
        "sigma_base": _num(float, 1.0, 0, None, lo_open=True),
        "sigma_amp": _num(float, 0.5, -10, 10),
        "sigma_lower": _num(float, 0.5, 0, None, lo_open=True),
        "sigma_upper": _num(float, 1.5, 0, None, lo_open=True),
        "zstar": _choice("quadratic", "quadratic", "zero"),
        "eps": _num(float, 0.1, 0, 10),
        "gamma": _num(float, 1.0, 0, 100, lo_open=True),
        "scale": _num(float, 0.05, 0, 1000),
        "y0_shape": _choice("sine", "sine", "zero"),
        "p0_shape": _choice("sine", "sine", "zero"),
        "placement": _choice("y", "y", "p"),
    },
    "grid": {
        "n_cells": _num(int, 128, 4, 4096),
        "n_steps": _num(int, 256, 1, 100000),
    },
    "weights": {
        "lambda": _num(float, 0.2, 0, 50, lo_open=True),
        "s_mult": _num(float, 1.5, 1, 1e6),
        "tau1": _num(float, 3.0, -100, 100),
        "tau2": _num(float, 3.0, -100, 100),
        "C0": _num(float, 1.0, 0, 1e6, lo_open=True),
        "log_weight_cap": _num(float, LOG_WEIGHT_CAP, 0, 600, lo_open=True),
    },
    "solver": {
        "cg_tol": _num(float, 1e-10, 0, 1, lo_open=True, hi_open=True),
        "liusternik_tol": _num(float, 1e-8, 0, 1, lo_open=True, hi_open=True),
        "max_iter": _num(int, 12, 1, 1000),
        "n_random_terminals": _num(int, 50, 20, 10000),
    },
    "large_time": {
        "T0": _num(float, 1.0, 0, 100, lo_open=True),
        "T_total": _num(float, 6.0, 0, 1000, lo_open=True),
        "threshold": _num(float, 1e-3, 0, None, lo_open=True),
    },
}


@dataclass
class RunConfig:
    values: dict
    source: str = "<defaults>"

    def __getitem__(self, key):
        section, name = key.split(".")
        return self.values[section][name]

    @property
    def scenario(self) -> str:
        return self.values["run"]["scenario"]

    @property
    def tau_star(self) -> float:
        w = self.values["weights"]
        return tau_star(w["tau1"], w["tau2"])

    def echo(self) -> dict:
        out = {f"{s}.{k}": v for s, sec in self.values.items() for k, v in sec.items()}
        out["weights.tau_star"] = self.tau_star
        return out

    def problem(self) -> ProblemData:
        p = self.values["problem"]

        def law(prefix):
            if p[f"{prefix}_law"] == "constant":
                return constant_law(p[f"{prefix}_base"])
            return tanh_law(p[f"{prefix}_base"], p[f"{prefix}_amp"], p[f"{prefix}_lower"],
                            p[f"{prefix}_upper"])

        lo, hi = p["x_lo"], p["x_hi"]
        length, scale = hi - lo, p["scale"]

        def shape(kind, k):
            if kind == "zero":
                return lambda x: 0.0 * np.asarray(x, float)
            return lambda x: scale * np.sin(k * np.pi * (np.asarray(x, float) - lo) / length)

        zstar = quadratic_potential(p["eps"], p["gamma"]) if p["zstar"] == "quadratic" \
            and p["eps"] > 0 else zero_potential()
        omega = (p["omega_lo"], p["omega_hi"])
        x0 = hi if np.isclose(omega[1], hi) else lo
        return ProblemData(kappa=law("kappa"), sigma=law("sigma"), zstar=zstar,
                           y0=shape(p["y0_shape"], 1), p0=shape(p["p0_shape"], 2),
                           domain=(lo, hi), T=p["T"], omega=omega, x0=x0, scale=scale)

    def weight_params(self, T: float, data: ProblemData) -> WeightParams:
        w = self.values["weights"]
        return WeightParams.default(T, data.domain, data.omega, lam=w["lambda"], C0=w["C0"],
                                    s_mult=w["s_mult"], tau1=w["tau1"], tau2=w["tau2"])


def _line_index(text: str) -> dict:
    """Map ``(section, key)`` to 1-based line numbers."""
    index, section = {}, None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
            index[(section, None)] = lineno
        elif stripped and not stripped.startswith(("#", ";")) and section is not None:
            key = re.split(r"[=:]", stripped, maxsplit=1)[0].strip()
            index[(section, key)] = lineno
    return index


def _convert(raw: str, spec: Key, where: str):
    if spec.kind is int:
        try:
            value = int(raw, 0)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    elif spec.kind is float:
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
        if not np.isfinite(value):
            raise ConfigError(f"{where}: value must be finite")
    else:
        value = raw.strip()
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"{where}: {value!r} out of range (admissible: {spec.rule})")
    return value


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{source}, line {exc.lineno}: key outside any [section]") from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{source}, line {lineno}: cannot parse {line.strip()!r}") from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        raise ConfigError(f"{source}, line {exc.lineno}: {exc.message.splitlines()[0]}") from None
    lines = _line_index(text)
    values = {s: {k: spec.default for k, spec in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}, line {lines.get((section, None), '?')}: unknown section "
                              f"[{section}] (known: {', '.join(SCHEMA)})")
        for key, raw in parser.items(section):
            where = f"{source}, line {lines.get((section, key), '?')}: {section}.{key}"
            if key not in SCHEMA[section]:
                raise ConfigError(f"{where}: unknown key")
            values[section][key] = _convert(raw, SCHEMA[section][key], where)
    cfg = RunConfig(values, source)
    _check_consistency(cfg)
    return cfg


def _check_consistency(cfg: RunConfig):
    if cfg.scenario is None:
        raise ConfigError("missing scenario (set run.scenario)")
    p, w, lt = cfg.values["problem"], cfg.values["weights"], cfg.values["large_time"]
    if not p["x_hi"] > p["x_lo"]:
        raise ConfigError("problem.x_hi must exceed problem.x_lo")
    if not abs(w["tau1"] - w["tau2"]) < 1:
        raise ConfigError("weights.tau1 and weights.tau2 must differ by less than 1")
    if not lt["T_total"] > lt["T0"]:
        raise ConfigError("large_time.T_total must exceed large_time.T0")
    for prefix in ("kappa", "sigma"):
        if p[f"{prefix}_law"] == "tanh":
            lo, hi = p[f"{prefix}_base"] - abs(p[f"{prefix}_amp"]), p[f"{prefix}_base"] + abs(p[f"{prefix}_amp"])
            if lo < p[f"{prefix}_lower"] or hi > p[f"{prefix}_upper"]:
                raise ConfigError(f"problem.{prefix}: range [{lo:g}, {hi:g}] leaves the declared "
                                  f"bounds [{p[prefix + '_lower']:g}, {p[prefix + '_upper']:g}]")
    try:
        data = cfg.problem()
        cfg.weight_params(data.T, data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(path) -> RunConfig:
    text = Path(path).read_text()
    return parse_config_text(text, str(path))


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_trajectory(path: Path, times, x, y, p) -> None:
    rows = ((t, xi, yi, pi) for k, t in enumerate(times)
            for xi, yi, pi in zip(x, y[k], p[k]))
    write_csv(path, ["t [time]", "x [length]", "y [temperature]", "p [potential]"], rows)


@dataclass
class RunReport:
    scenario: str
    config: dict
    exit_code: int
    metrics: dict = field(default_factory=dict)
    message: str = ""
    wall_clock: float = 0.0

    @property
    def succeeded(self) -> bool:
        return self.exit_code == EXIT_OK


def _write_report(out: Path, report: RunReport) -> None:
    cols = ["scenario [-]", "status [-]", "exit_code [-]", "message [-]"]
    vals = [report.scenario, "ok" if report.succeeded else "failed", report.exit_code, report.message]
    for k, v in report.metrics.items():
        cols.append(k)
        vals.append(v)
    write_csv(out / "report.csv", cols, [vals])


# ---------------------------------------------------------------------------
# scenarios


def _norms(grid, u):
    return np.sqrt(grid.h * np.sum(u * u, axis=1))


def _scenario_simulate(cfg, data, out, energy=False):
    g = cfg.values["grid"]
    tgrid = TimeGrid(data.T, g["n_steps"])
    grid = data.grid(g["n_cells"])
    traj = solve_forward(data, tgrid, grid, placement=cfg["problem.placement"])
    write_trajectory(out / "trajectory.csv", traj.t, grid.interior, traj.y, traj.p)
    yn, pn = _norms(grid, traj.y), _norms(grid, traj.p)
    metrics = {"y_T_l2 [temperature]": yn[-1], "p_T_l2 [potential]": pn[-1],
               "max_abs_y [temperature]": float(np.max(np.abs(traj.y)))}
    if energy:
        series = energy_S(traj)
        names = list(series.components)
        write_csv(out / "energy.csv", ["t [time]", "S [energy]"] + [f"{k} [energy]" for k in names],
                  ([t, s] + [series.components[k][i] for k in names]
                   for i, (t, s) in enumerate(zip(series.times, series.S))))
        fit = fit_decay_rate(series, (0.2 * data.T, data.T))
        metrics.update({"rho_hat [1/time]": fit.rho_hat, "c_hat [energy]": fit.c_hat,
                        "r2 [-]": fit.r2})
    return metrics


def _write_weights(out, params, times):
    prof = weight_profile(params, times)
    names = [k for k in prof if k != "t"]
    write_csv(out / "weights.csv", ["t [time]"] + [f"{k} [-]" for k in names],
              ([prof["t"][i]] + [prof[k][i] for k in names] for i in range(len(times))))


def _scenario_observability(cfg, data, out, seed):
    g = cfg.values["grid"]
    grid, tgrid = data.grid(g["n_cells"]), TimeGrid(data.T, g["n_steps"])
    ops = LinearizedOperators.from_problem(data, grid, tgrid, cfg["problem.placement"])
    zero = np.zeros((tgrid.n_steps + 1, grid.n_interior))

    def adjoint(phiT, psiT):
        return solve_adjoint(zero, zero, phiT, psiT, ops)

    est = estimate_observability_constant(adjoint, grid.n_interior, grid.h, tgrid.dt,
                                          data.omega_mask(grid.interior),
                                          cfg["solver.n_random_terminals"], np.random.default_rng(seed))
    write_csv(out / "observability.csv", ["sample [-]", "ratio [-]"], enumerate(est.ratios))
    _write_weights(out, cfg.weight_params(data.T, data), tgrid.times)
    return {"c_obs_max [-]": est.c_obs_max, "n_samples [-]": len(est.ratios),
            "n_flagged [-]": len(est.flagged), "n_skipped [-]": len(est.skipped)}


def _write_control(out, sol, data, log_rho2=None):
    x = sol.grid.interior
    mask = data.omega_mask(x)
    rows = ((t, xi, vi) for k, t in enumerate(sol.times) for xi, vi in zip(x[mask], sol.v[k][mask]))
    write_csv(out / "control.csv", ["t [time]", "x [length]", "v [source]"], rows)
    yn, pn = _norms(sol.grid, sol.y_sim), _norms(sol.grid, sol.p_sim)
    lr = np.full(len(sol.times), np.nan) if log_rho2 is None else log_rho2
    write_csv(out / "control_summary.csv",
              ["t [time]", "y_l2 [temperature]", "p_l2 [potential]", "log_rho2 [-]"],
              zip(sol.times, yn, pn, lr))
    write_trajectory(out / "trajectory.csv", sol.times, x, sol.y_sim, sol.p_sim)


def _control_metrics(sol, y0_norm):
    ty, tp = sol.terminal_norms()
    d = sol.diagnostics
    metrics = {"terminal_y_l2 [temperature]": ty, "terminal_p_l2 [potential]": tp,
               "terminal_relative [-]": (ty + tp) / y0_norm if y0_norm > 0 else 0.0,
               "max_abs_v [source]": float(np.max(np.abs(sol.v)))}
    for k in ("state_cost", "control_cost", "state_cost_full", "control_cost_full"):
        if k in d:
            metrics[f"{k} [-]"] = d[k]
    return metrics


def _initial_norm(data, grid):
    x = grid.interior
    return float(np.sqrt(grid.h * np.sum(data.y0(x) ** 2)) + np.sqrt(grid.h * np.sum(data.p0(x) ** 2)))


def _scenario_linear(cfg, data, out):
    g = cfg.values["grid"]
    grid, tgrid = data.grid(g["n_cells"]), TimeGrid(data.T, g["n_steps"])
    ops = LinearizedOperators.from_problem(data, grid, tgrid, cfg["problem.placement"])
    params = cfg.weight_params(data.T, data)
    system = assemble_variational(data, WeightFamily(params), ops,
                                  log_range=cfg["weights.log_weight_cap"])
    x = grid.interior
    sol = solve_linear_control(None, None, data.y0(x), data.p0(x), system, cfg["solver.cg_tol"])
    log_rho2 = np.concatenate([[np.nan], system.log_weights["rho2"]])
    _write_control(out, sol, data, log_rho2)
    _write_weights(out, params, tgrid.times)
    metrics = _control_metrics(sol, _initial_norm(data, grid))
    metrics.update({"cg_iterations [-]": sol.diagnostics["cg_iterations"],
                    "cg_rel_residual [-]": sol.diagnostics["cg_rel_residual"]})
    return metrics


def _write_history(out, history):
    write_csv(out / "residual_history.csv", ["iteration [-]", "residual [-]"], enumerate(history))


def _scenario_nonlinear(cfg, data, out):
    g = cfg.values["grid"]
    params = cfg.weight_params(data.T, data)
    try:
        sol = liusternik_iterate(data, cfg["solver.liusternik_tol"], cfg["solver.max_iter"],
                                 g["n_cells"], g["n_steps"], cfg["problem.placement"],
                                 WeightFamily(params), cg_tol=cfg["solver.cg_tol"],
                                 log_range=cfg["weights.log_weight_cap"])
    except ControlError as exc:
        _write_history(out, exc.history)
        raise
    _write_history(out, sol.history)
    _write_control(out, sol, data)
    metrics = _control_metrics(sol, _initial_norm(data, data.grid(g["n_cells"])))
    metrics["iterations [-]"] = sol.diagnostics["iterations"]
    return metrics


def _scenario_large_time(cfg, data, out):
    g, lt = cfg.values["grid"], cfg.values["large_time"]
    steps_per_unit = max(1, int(round(g["n_steps"] / data.T)))
    try:
        sol = large_time_control(data, lt["T0"], lt["T_total"], lt["threshold"], g["n_cells"],
                                 steps_per_unit, cfg["solver.liusternik_tol"], cfg["solver.max_iter"],
                                 cfg["problem.placement"])
    except OutsideBasinError as exc:
        write_csv(out / "large_time_failure.csv",
                  ["achieved [-]", "threshold [-]", "t_bar_min [time]"],
                  [[exc.achieved if exc.achieved is not None else np.nan, lt["threshold"],
                    exc.t_bar_min if exc.t_bar_min is not None else np.nan]])
        if exc.history:
            _write_history(out, exc.history)
        raise
    _write_history(out, sol.history)
    _write_control(out, sol, data)
    d = sol.diagnostics
    metrics = _control_metrics(sol, d["initial_norm"])
    metrics.update({"wait [time]": d["wait"], "achieved [-]": d["achieved"],
                    "t_bar_min [time]": d["t_bar_min"], "decay_rate [1/time]": d["decay_rate"],
                    "iterations [-]": d["iterations"]})
    return metrics


def run_scenario(cfg: RunConfig, out_dir, seed: Optional[int] = None) -> RunReport:
    """Run the configured scenario, write CSV artifacts into ``out_dir`` and return a report."""
    seed = cfg["run.seed"] if seed is None else seed
    start = time.perf_counter()
    report = RunReport(cfg.scenario, cfg.echo(), EXIT_OK)
    try:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        report.exit_code, report.message = EXIT_IO, f"cannot create output directory: {exc}"
        return report
    try:
        data = cfg.problem()
        hyp = validate_hypotheses(data, n_samples=201)
        name = cfg.scenario
        if name in ("simulate", "stability"):
            metrics = _scenario_simulate(cfg, data, out, energy=name == "stability")
        elif name == "observability":
            metrics = _scenario_observability(cfg, data, out, seed)
        elif name == "linear-control":
            metrics = _scenario_linear(cfg, data, out)
        elif name == "nonlinear-control":
            metrics = _scenario_nonlinear(cfg, data, out)
        else:
            metrics = _scenario_large_time(cfg, data, out)
        metrics["hypotheses_failed [-]"] = " ".join(c.name for c in hyp.failures()) or "none"
        report.metrics = metrics
    except OutsideBasinError as exc:
        report.exit_code, report.message = EXIT_BASIN, str(exc)
    except NonFiniteStateError as exc:
        report.exit_code, report.message = EXIT_BASIN, str(exc)
    except (SolverNonConvergence, ControlError) as exc:
        report.exit_code, report.message = EXIT_SOLVER, str(exc)
    except ValueError as exc:
        report.exit_code, report.message = EXIT_INVALID, str(exc)
    except OSError as exc:
        report.exit_code, report.message = EXIT_IO, str(exc)
    report.wall_clock = time.perf_counter() - start
    try:
        _write_report(Path(out_dir), report)
    except OSError as exc:
        report.exit_code, report.message = EXIT_IO, str(exc)
    return report


# ---------------------------------------------------------------------------
# entry point


def _load(path) -> tuple[Optional[RunConfig], int]:
    try:
        return parse_config(path), EXIT_OK
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return None, EXIT_IO
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None, EXIT_INVALID


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="thermistor", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario and write CSV files")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default="out")
    run.add_argument("--seed", type=int, default=None)
    val = sub.add_parser("validate", help="check a config file and the problem hypotheses")
    val.add_argument("--config", required=True)
    args = parser.parse_args(argv)

    cfg, code = _load(args.config)
    if cfg is None:
        return code
    if args.command == "validate":
        report = validate_hypotheses(cfg.problem())
        print(f"config ok: scenario={cfg.scenario} tau_star={cfg.tau_star:g}")
        print(report.summary())
        return EXIT_OK if report.passed else EXIT_INVALID
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    report = run_scenario(cfg, args.out, args.seed)
    status = "ok" if report.succeeded else f"failed ({report.message})"
    print(f"{report.scenario}: {status} in {report.wall_clock:.2f} s")
    for k, v in report.metrics.items():
        print(f"  {k} = {_fmt(v)}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
