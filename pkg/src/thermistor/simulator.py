"""Time integration of the nonlinear thermistor system and energy monitoring."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .discretization import (Grid1D, TimeGrid, assemble_divergence_form, half_node_average,
                             l2_norm, nodal_gradient, nodal_l2_norm)
from .model import ProblemData, nonlinear_rhs

PLACEMENTS = ("y", "p")


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int, what: str = "state"):
        super().__init__(f"non-finite {what} at time step {step}")
        self.step = step


def implicit_diffusion_solve(a_nodes, rhs, dt: float, grid: Grid1D) -> np.ndarray:
    """Solve ``(I + dt L_a) u = rhs`` where ``L_a u = -(a u')'`` (tridiagonal)."""
    a_nodes = np.asarray(a_nodes, dtype=float)
    if not np.all(a_nodes > 0):
        raise ValueError("diffusion coefficient must stay positive")
    a_half = half_node_average(a_nodes) * (dt / grid.h**2)
    n = grid.n_interior
    ab = np.zeros((3, n))
    ab[0, 1:] = -a_half[1:-1]
    ab[1] = 1.0 + a_half[:-1] + a_half[1:]
    ab[2, :-1] = -a_half[1:-1]
    return solve_banded((1, 1), ab, rhs, check_finite=False)


def step_nonlinear(y, p, t: float, dt: float, data: ProblemData, grid: Grid1D,
                   v=None, placement: str = "y"):
    """One semi-implicit step from ``t`` to ``t + dt``.

    Diffusivities are frozen at the current temperature and treated
    implicitly; all other terms are taken explicitly at ``t``. ``v`` is the
    control at the new time level (interior nodes), added to the equation
    selected by ``placement``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}")
    rhs_y, rhs_p = nonlinear_rhs(y, p, t, data, grid)
    if v is not None:
        if placement == "y":
            rhs_y = rhs_y + v
        else:
            rhs_p = rhs_p + v
    y_full = grid.extend(y)
    y_next = implicit_diffusion_solve(data.kappa(y_full), y + dt * rhs_y, dt, grid)
    p_next = implicit_diffusion_solve(data.sigma(y_full), p + dt * rhs_p, dt, grid)
    return y_next, p_next


@dataclass
class TrajectoryPair:
    times: TimeGrid
    grid: Grid1D
    y: np.ndarray
    p: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        shape = (self.times.n_steps + 1, self.grid.n_interior)
        for name in ("y", "p"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.times.times

    def time_derivatives(self):
        """Backward differences; the first node reuses the forward difference."""
        out = []
        for u in (self.y, self.p):
            du = np.empty_like(u)
            du[1:] = np.diff(u, axis=0) / self.times.dt
            du[0] = du[1]
            out.append(du)
        return tuple(out)

    def l2_norms(self):
        h = self.grid.h
        return np.sqrt(h * np.sum(self.y**2, axis=1)), np.sqrt(h * np.sum(self.p**2, axis=1))


def solve_forward(data: ProblemData, tgrid: TimeGrid, grid: Grid1D | int = 128, control=None,
                  placement: str = "y", y0=None, p0=None, t0: float = 0.0) -> TrajectoryPair:
    """March the nonlinear system over ``tgrid`` (shifted by ``t0``).

    ``control`` has shape ``(n_steps + 1, n_interior)``; row ``n`` acts on the
    step ending at time level ``n`` and values outside the control region are
    ignored (extension by zero).
    """
    if isinstance(grid, (int, np.integer)):
        grid = data.grid(int(grid))
    x = grid.interior
    y = np.asarray(data.y0(x) if y0 is None else y0, dtype=float).copy()
    p = np.asarray(data.p0(x) if p0 is None else p0, dtype=float).copy()
    n_steps, dt = tgrid.n_steps, tgrid.dt
    if control is not None:
        control = np.asarray(control, dtype=float)
        if control.shape != (n_steps + 1, grid.n_interior):
            raise ValueError(f"control shape {control.shape} does not match the grids")
        control = control * data.omega_mask(x)
    ys = np.empty((n_steps + 1, grid.n_interior))
    ps = np.empty_like(ys)
    ys[0], ps[0] = y, p
    for n in range(1, n_steps + 1):
        v = None if control is None else control[n]
        with np.errstate(over="ignore", invalid="ignore"):
            y, p = step_nonlinear(y, p, t0 + tgrid.times[n - 1], dt, data, grid, v, placement)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(p))):
            raise NonFiniteStateError(n)
        ys[n], ps[n] = y, p
    return TrajectoryPair(tgrid, grid, ys, ps, t0)


# ---------------------------------------------------------------------------
# energy


ENERGY_COMPONENTS = ("y", "grad_y", "lap_y", "grad_y_t", "p", "grad_p", "lap_p", "grad_p_t")


@dataclass
class EnergySeries:
    times: np.ndarray
    components: dict = field(repr=False)

    @property
    def S(self) -> np.ndarray:
        return sum(self.components[k] for k in ENERGY_COMPONENTS)


def _sq_norms(u: np.ndarray, grid: Grid1D):
    lap = (assemble_divergence_form(np.ones(grid.n_cells + 1), grid) @ u.T).T
    grad = nodal_gradient(grid.extend(u), grid.h)
    w = np.full(grad.shape[-1], grid.h)
    w[0] = w[-1] = grid.h / 2
    return (grid.h * np.sum(u * u, axis=1), np.sum(w * grad * grad, axis=1),
            grid.h * np.sum(lap * lap, axis=1))


def energy_S(traj: TrajectoryPair) -> EnergySeries:
    """Squared L2, H1, Laplacian and ``grad u_t`` norms of both fields at each node."""
    if traj.times.n_steps < 1:
        raise ValueError("need at least two time nodes")
    y_t, p_t = traj.time_derivatives()
    comps = {}
    for name, u, u_t in (("y", traj.y, y_t), ("p", traj.p, p_t)):
        l2, h1, lap = _sq_norms(u, traj.grid)
        _, h1_t, _ = _sq_norms(u_t, traj.grid)
        comps[name] = l2
        comps[f"grad_{name}"] = h1
        comps[f"lap_{name}"] = lap
        comps[f"grad_{name}_t"] = h1_t
    return EnergySeries(traj.t.copy(), comps)


@dataclass
class DecayFit:
    rho_hat: float
    c_hat: float
    r2: float

    def __iter__(self):
        return iter((self.rho_hat, self.c_hat, self.r2))


def fit_decay_rate(series: EnergySeries | tuple, window: tuple) -> DecayFit:
    """Least-squares fit ``log S = log c - rho t`` over ``window``.

    ``series`` is an :class:`EnergySeries` or a ``(times, values)`` pair.
    """
    if isinstance(series, EnergySeries):
        t, S = series.times, series.S
    else:
        t, S = (np.asarray(a, dtype=float) for a in series)
    lo, hi = window
    sel = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    if np.count_nonzero(sel) < 2:
        raise ValueError(f"window {window} holds fewer than two samples")
    t, S = t[sel], S[sel]
    bad = np.flatnonzero(~(S > 0))
    if bad.size:
        raise ValueError(f"non-positive energy at t = {t[bad[0]]}")
    logS = np.log(S)
    slope, intercept = np.polyfit(t, logS, 1)
    resid = logS - (slope * t + intercept)
    ss_tot = np.sum((logS - logS.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(-slope), float(np.exp(intercept)), float(r2))


def energy_ratio(traj: TrajectoryPair, data: ProblemData) -> np.ndarray:
    """Empirical ``S(t) / (S(0) + C*)`` where ``C*`` bounds the boundary-potential norm."""
    S = energy_S(traj).S
    denom = S[0] + data.zstar.decay_amp
    return S / denom if denom > 0 else np.zeros_like(S)
