"""Simulation and null control of a 1D thermistor system.

Modules
-------
model           problem data, coefficient laws, hypothesis checks
discretization  grids, conservative finite differences, discrete norms
simulator       semi-implicit time stepping, energy and decay fits
carleman        Carleman weight family and observability estimates
control         linear and nonlinear null controls, large-time strategy
cli             configuration files and scenario runner
"""
from .carleman import WeightFamily, WeightParams, build_eta0, tau_star
from .control import (ControlSolution, LinearizedOperators, assemble_variational, large_time_control,
                      liusternik_iterate, solve_adjoint, solve_linear_control, solve_linearized)
from .discretization import Grid1D, TimeGrid
from .model import ProblemData, default_problem, validate_hypotheses
from .simulator import energy_S, fit_decay_rate, solve_forward, step_nonlinear

__all__ = [
    "ControlSolution", "Grid1D", "LinearizedOperators", "ProblemData", "TimeGrid", "WeightFamily",
    "WeightParams", "assemble_variational", "build_eta0", "default_problem", "energy_S",
    "fit_decay_rate", "large_time_control", "liusternik_iterate", "solve_adjoint", "solve_forward",
    "solve_linear_control", "solve_linearized", "step_nonlinear", "tau_star", "validate_hypotheses",
]
__version__ = "0.1.0"
