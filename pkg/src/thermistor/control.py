"""Null controls for the linearized and nonlinear thermistor systems.

The linear problem is solved as a weighted space-time least-squares problem:
minimize the weighted norms of the state and of the control subject to the
discrete linearized dynamics. Its Lagrange multiplier solves a sparse SPD
system; state and control are recovered from it pointwise. The nonlinear
problem is handled by a quasi-Newton iteration whose derivative is frozen at
the zero state, each step being one linear control solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .carleman import CLAMP, WeightFamily, WeightParams
from .discretization import (Grid1D, TimeGrid, assemble_divergence_form, divergence_flux,
                             gradient_matrix, nodal_gradient)
from .model import ProblemData
from .simulator import NonFiniteStateError, TrajectoryPair, solve_forward


# dynamic range allowed to the normalized log-weights in the variational solve
LOG_WEIGHT_CAP = 10.0


class ControlError(RuntimeError):
    """Base class for control failures; ``history`` holds residual norms."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


class SolverNonConvergence(ControlError):
    pass


class OutsideBasinError(ControlError):
    def __init__(self, message: str, history=None, achieved=None, t_bar_min=None):
        super().__init__(message, history)
        self.achieved = achieved
        self.t_bar_min = t_bar_min


def cutoff(x, omega, inner_fraction: float = 0.6) -> np.ndarray:
    """Quintic bump: 1 on the central ``inner_fraction`` of ``omega``, 0 outside."""
    a, b = omega
    x = np.asarray(x, dtype=float)
    c, half_in = 0.5 * (a + b), 0.5 * inner_fraction * (b - a)
    half_out = 0.5 * (b - a)
    u = np.clip((half_out - np.abs(x - c)) / (half_out - half_in), 0.0, 1.0)
    return u**3 * (10 - 15 * u + 6 * u**2)


# ---------------------------------------------------------------------------
# linearization about zero


@dataclass
class LinearizedOperators:
    """Discrete operators of the system linearized about the zero state.

    The forward scheme reads, for ``n = 1 .. N`` and ``Y = (y, p)``::

        (Y^n - Y^{n-1}) / dt + D Y^n = J^{n-1} Y^{n-1} + S^{n-1} + B v^n

    with ``D`` the frozen diffusion and ``J^k`` the explicit coupling at level ``k``.
    """

    grid: Grid1D
    tgrid: TimeGrid
    kappa0: float
    sigma0: float
    dsigma0: float
    dz: np.ndarray            # grad z* at interior nodes, one row per time level
    z_nodes: np.ndarray       # z* at all nodes, one row per time level
    omega: tuple
    placement: str = "y"
    t0: float = 0.0
    chi: np.ndarray = field(default=None, repr=False)
    lap: sp.csr_matrix = field(default=None, repr=False)
    grad: sp.csr_matrix = field(default=None, repr=False)

    def __post_init__(self):
        if self.placement not in ("y", "p"):
            raise ValueError("placement must be 'y' or 'p'")
        if not (self.kappa0 > 0 and self.sigma0 > 0):
            raise ValueError("linearized diffusivities must be positive")
        x = self.grid.interior
        if self.chi is None:
            self.chi = cutoff(x, self.omega)
        self.lap = assemble_divergence_form(np.ones(self.grid.n_cells + 1), self.grid)
        self.grad = gradient_matrix(self.grid)[1:-1]

    @classmethod
    def from_problem(cls, data: ProblemData, grid: Grid1D, tgrid: TimeGrid, placement="y",
                     t0: float = 0.0, chi=None) -> "LinearizedOperators":
        t = t0 + tgrid.times
        x = grid.interior
        dz = np.array([data.zstar.space_grad(x, tk) for tk in t])
        zn = np.array([data.zstar.value(grid.nodes, tk) for tk in t])
        k0, s0 = float(data.kappa(0.0)), float(data.sigma(0.0))
        ops = cls(grid, tgrid, k0, s0, float(data.sigma.d1(0.0)), dz, zn, tuple(data.omega),
                  placement, t0, chi)
        lo, hi = data.kappa.lower_bound, data.kappa.upper_bound
        if not lo <= k0 <= hi or not data.sigma.lower_bound <= s0 <= data.sigma.upper_bound:
            raise ValueError("kappa(0) or sigma(0) outside the law bounds")
        return ops

    @property
    def m(self) -> int:
        return self.grid.n_interior

    @property
    def N(self) -> int:
        return self.tgrid.n_steps

    def diffusion(self) -> sp.csr_matrix:
        return sp.block_diag([self.kappa0 * self.lap, self.sigma0 * self.lap], format="csr")

    def coupling(self, k: int) -> sp.csr_matrix:
        """Jacobian of the explicit source terms at time level ``k`` (cached)."""
        cache = self.__dict__.setdefault("_coupling_cache", {})
        if k not in cache:
            cache[k] = self._build_coupling(k)
        return cache[k]

    def _build_coupling(self, k: int) -> sp.csr_matrix:
        h = self.grid.h
        dz = self.dz[k]
        d = np.diff(self.z_nodes[k]) / h               # z*' at half nodes
        c = self.dsigma0 / (2 * h)
        div = sp.diags([-c * d[1:-1], c * (d[1:] - d[:-1]), c * d[1:-1]], [-1, 0, 1])
        yy = sp.diags(self.dsigma0 * dz * dz)
        yp = sp.diags(2 * self.sigma0 * dz) @ self.grad
        return sp.bmat([[yy, yp], [div, None]], format="csr")

    def control_map(self) -> sp.csr_matrix:
        """Injects an interior control field into the selected equation."""
        eye = sp.identity(self.m, format="csr")
        zero = sp.csr_matrix((self.m, self.m))
        blocks = [[eye], [zero]] if self.placement == "y" else [[zero], [eye]]
        return sp.bmat(blocks, format="csr")


def _stack(y, p):
    return np.concatenate([np.asarray(y, float), np.asarray(p, float)], axis=-1)


def _levels(arr, ops: LinearizedOperators, name: str) -> np.ndarray:
    shape = (ops.N + 1, ops.m)
    if arr is None:
        return np.zeros(shape)
    arr = np.asarray(arr, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


def solve_linearized(ops: LinearizedOperators, y0, p0, f=None, g=None, v=None):
    """March the linearized scheme; sources are taken at the old level, ``v`` at the new one."""
    f, g, v = _levels(f, ops, "f"), _levels(g, ops, "g"), _levels(v, ops, "v")
    dt = ops.tgrid.dt
    lhs = spla.factorized((sp.identity(2 * ops.m) + dt * ops.diffusion()).tocsc())
    B = ops.control_map()
    mask = ops.chi > 0
    Y = np.empty((ops.N + 1, 2 * ops.m))
    Y[0] = _stack(y0, p0)
    for n in range(1, ops.N + 1):
        rhs = Y[n - 1] + dt * (ops.coupling(n - 1) @ Y[n - 1] + _stack(f[n - 1], g[n - 1])
                               + B @ (v[n] * mask))
        Y[n] = lhs(rhs)
        if not np.all(np.isfinite(Y[n])):
            raise NonFiniteStateError(n)
    return Y[:, :ops.m], Y[:, ops.m:]


def solve_adjoint(F, G, phiT, psiT, ops: LinearizedOperators):
    """Backward march of the exact discrete transpose of :func:`solve_linearized`.

    Returns ``(phi, psi)`` with rows at time levels ``0 .. N``; row ``N`` is the
    terminal datum. ``F``, ``G`` are sampled at time levels (row 0 unused).
    """
    F, G = _levels(F, ops, "F"), _levels(G, ops, "G")
    terminal = _stack(phiT, psiT)
    if not np.all(np.isfinite(terminal)):
        raise ValueError("terminal data must be finite")
    dt = ops.tgrid.dt
    lhs = spla.factorized((sp.identity(2 * ops.m) + dt * ops.diffusion()).tocsc())
    Phi = np.empty((ops.N + 1, 2 * ops.m))
    Phi[-1] = terminal
    for n in range(ops.N, 0, -1):
        rhs = Phi[n] + dt * _stack(F[n], G[n])
        if n < ops.N:
            rhs = rhs + dt * (ops.coupling(n).T @ Phi[n])
        Phi[n - 1] = lhs(rhs)
        if not np.all(np.isfinite(Phi[n - 1])):
            raise NonFiniteStateError(n - 1, "adjoint state")
    return Phi[:, :ops.m], Phi[:, ops.m:]


def duality_residual(ops: LinearizedOperators, y0, p0, f, g, v, F, G, phiT, psiT) -> dict:
    """Summation-by-parts identity between the forward and adjoint solvers.

    ``lhs = int (S + B v) . Phi + <Y(0), Phi(0)>`` and
    ``rhs = <Y(T), Phi_T> + int (F, G) . Y``. The two differ by
    ``dt <Y(0), J^0' Phi(0)>``, which is returned as ``correction``.
    """
    y, p = solve_linearized(ops, y0, p0, f, g, v)
    phi, psi = solve_adjoint(F, G, phiT, psiT, ops)
    h, dt = ops.grid.h, ops.tgrid.dt
    f, g, v = _levels(f, ops, "f"), _levels(g, ops, "g"), _levels(v, ops, "v")
    F, G = _levels(F, ops, "F"), _levels(G, ops, "G")
    Y, Phi = _stack(y, p), _stack(phi, psi)
    Bv = (ops.control_map() @ (v * (ops.chi > 0)).T).T
    S = _stack(f, g)
    lhs = dt * h * np.sum((S[:-1] + Bv[1:]) * Phi[:-1]) + h * Y[0] @ Phi[0]
    rhs = h * Y[-1] @ Phi[-1] + dt * h * np.sum(_stack(F, G)[1:] * Y[1:])
    corr = dt * h * Y[0] @ (ops.coupling(0).T @ Phi[0])
    return {"lhs": lhs, "rhs": rhs, "residual": lhs - rhs, "correction": corr,
            "exact_residual": lhs + corr - rhs}


# ---------------------------------------------------------------------------
# weighted variational system


@dataclass
class VariationalSystem:
    """SPD system ``A_h Phi = G_h`` for the multiplier of the weighted problem.

    Unknowns are ordered time-major over levels ``1 .. N``, each level holding
    the two adjoint fields at interior nodes.
    """

    ops: LinearizedOperators
    A: sp.csr_matrix
    L: sp.csr_matrix
    state_inv_w: np.ndarray     # rho2^-2 per unknown
    control_w: np.ndarray       # chi rho0^-2 per control unknown
    B: sp.csr_matrix
    log_weights: dict           # normalized and capped; used by the solver
    log_weights_full: dict      # normalized only
    offsets: dict
    family: WeightFamily
    _solver: object = field(default=None, repr=False)
    _kkt: object = field(default=None, repr=False)

    @property
    def n_unknowns(self) -> int:
        return self.A.shape[0]

    def rows(self, f, g, y0, p0) -> np.ndarray:
        """Right-hand rows ``R``; the initial state enters the first row."""
        ops = self.ops
        f, g = _levels(f, ops, "f"), _levels(g, ops, "g")
        R = _stack(f, g)[:-1].copy()
        Y0 = _stack(y0, p0)
        R[0] += Y0 / ops.tgrid.dt + ops.coupling(0) @ Y0
        return R.ravel()

    def rhs(self, f, g, y0, p0) -> np.ndarray:
        return self.ops.tgrid.dt * self.ops.grid.h * self.rows(f, g, y0, p0)

    def recover(self, Phi) -> tuple:
        ops = self.ops
        Y = (self.state_inv_w * (self.L.T @ Phi)).reshape(ops.N, 2 * ops.m)
        v = -(self.control_w * (self.B.T @ Phi)).reshape(ops.N, ops.m)
        return Y, v

    def constraint_residual(self, Y, v, R) -> np.ndarray:
        """``R - (L Y - B v)`` for levels ``1 .. N`` flattened."""
        return R - (self.L @ np.ravel(Y) - self.B @ np.ravel(v))

    def refine(self, Phi, R, steps: int = 2):
        """Iterative refinement on the optimality system in ``(Y, v, Phi)``.

        The normal equations square the condition number, so their solution
        leaves a constraint residual well above rounding; a few correction
        steps with a sparse LU of the unreduced saddle-point system remove it.
        """
        ops = self.ops
        sel = self.control_w > 0
        if self._kkt is None:
            n_y, n_c = self.L.shape[1], int(np.count_nonzero(sel))
            Bs = self.B[:, sel]
            K = sp.bmat([[sp.identity(n_y), None, -sp.diags(self.state_inv_w) @ self.L.T],
                         [None, sp.identity(n_c), sp.diags(self.control_w[sel]) @ Bs.T],
                         [self.L, -Bs, None]], format="csc")
            self._kkt = (K, spla.splu(K, permc_spec="COLAMD"))
        K, lu = self._kkt
        Y, v = self.recover(Phi)
        z = np.concatenate([Y.ravel(), v.ravel()[sel], Phi])
        rhs = np.concatenate([np.zeros(K.shape[0] - R.size), R])
        for _ in range(steps):
            z += lu.solve(rhs - K @ z)
        n_y = self.L.shape[1]
        v_full = np.zeros(v.size)
        v_full[sel] = z[n_y:n_y + np.count_nonzero(sel)]
        return (z[:n_y].reshape(ops.N, 2 * ops.m), v_full.reshape(ops.N, ops.m),
                z[n_y + np.count_nonzero(sel):])

    def weight_sq(self, name: str, capped: bool = True) -> np.ndarray:
        """Squared weight at levels ``1 .. N``, clamped before exponentiation."""
        logs = self.log_weights if capped else self.log_weights_full
        return self.family.exp_clamped(2 * logs[name])


def _normalized_logs(family: WeightFamily, times, names):
    table = family.log_weight_table(times)
    offsets = {k: float(np.min(table[k][np.isfinite(table[k])])) for k in names}
    return table, offsets


def assemble_variational(data: ProblemData, weights: Optional[WeightFamily],
                         ops: LinearizedOperators, unit_weights: bool = False,
                         log_range: Optional[float] = LOG_WEIGHT_CAP) -> VariationalSystem:
    """Assemble ``A_h = dt h (L W^-1 L' + B chi rho0^-2 B')``.

    ``W = rho2^2`` at each time level; each weight is divided by its minimum
    over the grid before use (a constant factor per weight) and its exponent is
    clamped. ``unit_weights`` replaces both weights by one.
    """
    N, m, dt, h = ops.N, ops.m, ops.tgrid.dt, ops.grid.h
    if weights is None:
        weights = WeightFamily(WeightParams.default(ops.tgrid.T, data.domain, data.omega))
    times = ops.tgrid.times[1:]
    names = ("rho", "rho0", "rho2", "rho3", "rho5")
    table, offsets = _normalized_logs(weights, times, names)
    full = {k: table[k] - offsets[k] for k in names}
    logs = full if log_range is None else {k: np.minimum(v, log_range) for k, v in full.items()}
    if unit_weights:
        inv_w = np.ones(N)
        ctrl = np.ones(N)
    else:
        inv_w = weights.exp_clamped(-2 * logs["rho2"])
        ctrl = weights.exp_clamped(-2 * logs["rho0"])
    if not (np.all(np.isfinite(inv_w)) and np.all(np.isfinite(ctrl))):
        raise AssertionError("clamped weights must be finite")
    state_inv_w = np.repeat(inv_w, 2 * m)
    control_w = np.repeat(ctrl, m) * np.tile(ops.chi, N)

    diag_block = (sp.identity(2 * m) / dt + ops.diffusion()).tocsr()
    blocks = [[None] * N for _ in range(N)]
    for n in range(N):
        blocks[n][n] = diag_block
        if n > 0:
            blocks[n][n - 1] = -(sp.identity(2 * m) / dt + ops.coupling(n))
    L = sp.bmat(blocks, format="csr")
    B = sp.block_diag([ops.control_map()] * N, format="csr")
    K = L @ sp.diags(state_inv_w) @ L.T + B @ sp.diags(control_w) @ B.T
    A = (dt * h * K).tocsr()
    A = (0.5 * (A + A.T)).tocsr()
    return VariationalSystem(ops, A, L, state_inv_w, control_w, B, logs, full, offsets, weights)


# ---------------------------------------------------------------------------
# conjugate gradients


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    history: list
    rel_residual: float
    preconditioner: str
    at_floor: bool = False


def conjugate_gradient(A, b, tol: float = 1e-10, maxiter: Optional[int] = None,
                       preconditioner: str = "jacobi", M=None) -> CGResult:
    """Preconditioned CG on the symmetrically diagonal-scaled system.

    ``preconditioner`` is ``"jacobi"`` (diagonal only) or ``"lu"`` (sparse LU
    of the scaled matrix, reused across calls through ``M``). Convergence is
    declared on the recomputed residual of the scaled system.
    """
    n = A.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return CGResult(np.zeros(n), 0, [0.0], 0.0, preconditioner)
    d = 1.0 / np.sqrt(A.diagonal())
    As = (sp.diags(d) @ A @ sp.diags(d)).tocsr()
    bs = d * b
    bsnorm = np.linalg.norm(bs)
    abs_As = abs(As)
    if M is None and preconditioner == "lu":
        M = make_lu_preconditioner(As)
    precond = M if M is not None else (lambda r: r)
    history = [1.0]
    z = np.zeros(n)
    r = bs.copy()
    it, restarts, best = 0, 0, np.inf
    while it < maxiter:
        s = precond(r)
        q = s.copy()
        rs = r @ s
        while it < maxiter:
            Aq = As @ q
            alpha = rs / (q @ Aq)
            z += alpha * q
            r -= alpha * Aq
            it += 1
            history.append(float(np.linalg.norm(r) / bsnorm))
            if history[-1] <= tol:
                break
            s = precond(r)
            rs_new = r @ s
            q = s + (rs_new / rs) * q
            rs = rs_new
        r = bs - As @ z                          # recomputed residual
        true_res = float(np.linalg.norm(r) / bsnorm)
        history[-1] = true_res
        if true_res <= tol:
            return CGResult(d * z, it, history, true_res, preconditioner)
        # rounding level of the residual evaluation itself
        floor = 16 * np.finfo(float).eps * float(np.linalg.norm(abs_As @ np.abs(z))) / bsnorm
        restarts += 1
        if true_res >= 0.5 * best and restarts >= 3 and true_res <= floor:
            return CGResult(d * z, it, history, true_res, preconditioner, at_floor=True)
        best = min(best, true_res)
    raise SolverNonConvergence(
        f"CG did not reach {tol:g} in {maxiter} iterations (last {history[-1]:.3e})", history)


def make_lu_preconditioner(As):
    lu = spla.splu(As.tocsc(), permc_spec="COLAMD")
    return lu.solve


# ---------------------------------------------------------------------------
# linear control


@dataclass
class ControlSolution:
    times: np.ndarray
    grid: Grid1D
    v: np.ndarray
    y: np.ndarray
    p: np.ndarray
    y_sim: np.ndarray
    p_sim: np.ndarray
    diagnostics: dict
    history: list = field(default_factory=list)
    placement: str = "y"

    def terminal_norms(self) -> tuple:
        h = self.grid.h
        return (float(np.sqrt(h * self.y_sim[-1] @ self.y_sim[-1])),
                float(np.sqrt(h * self.p_sim[-1] @ self.p_sim[-1])))


def _weighted_sum(w_sq, fields, dt, h):
    return float(dt * h * sum(np.sum(w_sq[:, None] * u**2) for u in fields))


def weighted_diagnostics(system: VariationalSystem, y, p, v, f=None, g=None) -> dict:
    """Weighted integrals of a controlled trajectory; rows are time levels ``0 .. N``.

    Keys without suffix use the weights the solver optimized with; the
    ``_full`` variants use the uncapped (but clamped) weights.
    """
    ops = system.ops
    dt, h = ops.tgrid.dt, ops.grid.h
    inner = ops.tgrid.times[1:] < ops.tgrid.T
    norms_sq = h * (np.sum(y[1:] ** 2, axis=1) + np.sum(p[1:] ** 2, axis=1))
    out = {}
    for suffix, capped in (("", True), ("_full", False)):
        rho2, rho0 = system.weight_sq("rho2", capped)[inner], system.weight_sq("rho0", capped)[inner]
        rho3, rho = system.weight_sq("rho3", capped)[inner], system.weight_sq("rho", capped)[inner]
        out["state_cost" + suffix] = _weighted_sum(rho2, (y[1:][inner], p[1:][inner]), dt, h)
        out["control_cost" + suffix] = _weighted_sum(rho0, (v[1:][inner],), dt, h)
        out["sup_rho3_state" + suffix] = float(np.max(rho3 * norms_sq[inner]))
        if f is not None:
            out["source_cost" + suffix] = _weighted_sum(rho, (f[:-1][inner], g[:-1][inner]), dt, h)
    for k, val in out.items():
        if not np.isfinite(val):
            raise AssertionError(f"weighted diagnostic {k} overflowed")
    return out


def _solve_multiplier(system: VariationalSystem, f, g, y0, p0, tol, preconditioner, maxiter,
                      refine_steps=2):
    ops = system.ops
    R = system.rows(f, g, y0, p0)
    b = ops.tgrid.dt * ops.grid.h * R
    if preconditioner == "lu" and system._solver is None:
        d = 1.0 / np.sqrt(system.A.diagonal())
        system._solver = make_lu_preconditioner(sp.diags(d) @ system.A @ sp.diags(d))
    res = conjugate_gradient(system.A, b, tol, maxiter, preconditioner,
                             system._solver if preconditioner == "lu" else None)
    Yr, vr = system.recover(res.x)
    before = float(np.max(np.abs(system.constraint_residual(Yr, vr, R)), initial=0.0))
    if refine_steps > 0 and np.any(R):
        Yr, vr, _ = system.refine(res.x, R, refine_steps)
    m = ops.m
    Y = np.vstack([_stack(y0, p0), Yr])
    v = np.vstack([np.zeros(m), vr])
    constraint = float(np.max(np.abs(system.constraint_residual(Yr, vr, R)), initial=0.0))
    return Y, v, res, constraint, before


def solve_linear_control(f, g, y0, p0, system: VariationalSystem, tol: float = 1e-10,
                         preconditioner: str = "lu", maxiter: Optional[int] = None,
                         refine_steps: int = 2) -> ControlSolution:
    """Null control of the linearized system by the weighted multiplier method.

    ``f``, ``g`` are sampled at time levels (``None`` for zero). The control is
    recovered from the multiplier and the linearized system is re-simulated
    with it; terminal norms refer to that re-simulation. ``refine_steps``
    correction steps on the unreduced optimality system follow the CG solve
    (0 disables them).
    """
    ops = system.ops
    f, g = _levels(f, ops, "f"), _levels(g, ops, "g")
    y0, p0 = np.asarray(y0, float), np.asarray(p0, float)
    Y, v, res, constraint, before = _solve_multiplier(system, f, g, y0, p0, tol, preconditioner, maxiter,
                                              refine_steps)
    m = ops.m
    y_sim, p_sim = solve_linearized(ops, y0, p0, f, g, v)
    diag = weighted_diagnostics(system, y_sim, p_sim, v, f, g)
    diag.update(cg_iterations=res.iterations, cg_rel_residual=res.rel_residual,
                cg_at_floor=res.at_floor, constraint_residual_cg=before,
                constraint_residual=constraint)
    sol = ControlSolution(ops.tgrid.times + ops.t0, ops.grid, v, Y[:, :m], Y[:, m:], y_sim, p_sim,
                          diag, res.history, ops.placement)
    ty, tp = sol.terminal_norms()
    diag.update(terminal_y=ty, terminal_p=tp)
    return sol


# ---------------------------------------------------------------------------
# nonlinear control


class NonlinearMap:
    """Discrete residual map of the controlled nonlinear scheme.

    ``apply(Y, v)`` returns one row per step ``n = 1 .. N`` together with the
    initial state. The rows equal :meth:`target` exactly when ``Y`` is the
    trajectory produced by :func:`solve_forward` with control ``v``. The
    derivative at zero is the linearized operator used by the multiplier solve.
    """

    def __init__(self, data: ProblemData, ops: LinearizedOperators):
        self.data, self.ops = data, ops
        grid, t = ops.grid, ops.t0 + ops.tgrid.times
        x = grid.interior
        self.sigma0 = ops.sigma0
        f = np.array([data.f(x, tk) for tk in t[:-1]])
        g = np.array([data.g(x, tk) for tk in t[:-1]])
        zt = np.array([data.zstar.time_deriv(x, tk) for tk in t[:-1]])
        dz = ops.dz[:-1]
        ones = np.full(grid.n_cells + 1, self.sigma0)
        div0 = divergence_flux(ones, ops.z_nodes[:-1], grid.h)
        self._target = np.concatenate([self.sigma0 * dz * dz + f, div0 - zt + g], axis=1)

    def target(self, y0, p0):
        return self._target, _stack(y0, p0)

    def apply(self, Y, v):
        ops, data, grid = self.ops, self.data, self.ops.grid
        m, dt, h = ops.m, ops.tgrid.dt, grid.h
        y, p = Y[:, :m], Y[:, m:]
        yf_prev = grid.extend(y[:-1])
        sig_n = data.sigma(yf_prev)
        kap_n = data.kappa(yf_prev)
        sig = sig_n[:, 1:-1]
        dp = nodal_gradient(grid.extend(p[:-1]), h)[:, 1:-1]
        dz = ops.dz[:-1]
        ry = ((y[1:] - y[:-1]) / dt - divergence_flux(kap_n, grid.extend(y[1:]), h)
              - sig * dp * dp - 2 * sig * dp * dz - (sig - self.sigma0) * dz * dz)
        rp = ((p[1:] - p[:-1]) / dt - divergence_flux(sig_n, grid.extend(p[1:]), h)
              - divergence_flux(sig_n - self.sigma0, ops.z_nodes[:-1], h))
        if ops.placement == "y":
            ry = ry - v[1:] * (ops.chi > 0)
        else:
            rp = rp - v[1:] * (ops.chi > 0)
        return np.concatenate([ry, rp], axis=1), Y[0].copy()


def zeta_norm(system: VariationalSystem, rows, init) -> float:
    """Weighted space-time norm of a residual ``(rows, initial state)``.

    Combines the ``rho``-weighted rows, the ``rho5``-weighted time differences
    of the rows, the H1 seminorm of the first row and an H3-type norm of the
    initial state.
    """
    ops = system.ops
    grid, dt, h, m = ops.grid, ops.tgrid.dt, ops.grid.h, ops.m
    inner = ops.tgrid.times[1:] < ops.tgrid.T
    w = system.weight_sq("rho")[inner]
    w5 = system.weight_sq("rho5")[inner][1:]
    r = rows[inner]
    total = dt * h * np.sum(w[:, None] * r * r)
    total += dt * h * np.sum(w5[:, None] * (np.diff(r, axis=0) / dt) ** 2)
    for part in (rows[0, :m], rows[0, m:]):
        g0 = nodal_gradient(grid.extend(part), h)
        total += h * np.sum(g0 * g0)
    lap = ops.lap
    for part in (init[:m], init[m:]):
        d2 = lap @ part
        d1 = nodal_gradient(grid.extend(part), h)
        d3 = nodal_gradient(grid.extend(d2), h)
        total += h * (part @ part + d1 @ d1 + d2 @ d2 + d3 @ d3)
    return float(np.sqrt(total))


def _residual_floor(system, abs_L, abs_B, Y, v, shape) -> float:
    """Weighted norm of the rounding error made when evaluating the residual rows."""
    mag = abs_L @ np.abs(Y[1:]).ravel() + abs_B @ np.abs(v[1:]).ravel()
    rows = 16 * np.finfo(float).eps * mag.reshape(shape)
    return zeta_norm(system, rows, np.zeros(shape[1]))


def liusternik_iterate(data: ProblemData, tol: float = 1e-8, max_iter: int = 12,
                       n_cells: int = 128, n_steps: int = 256, placement: str = "y",
                       weights: Optional[WeightFamily] = None, y0=None, p0=None,
                       t0: float = 0.0, T: Optional[float] = None, cg_tol: float = 1e-10,
                       log_range: Optional[float] = LOG_WEIGHT_CAP,
                       refine_steps: int = 2) -> ControlSolution:
    """Quasi-Newton iteration with the derivative frozen at zero.

    Each step solves the linear control problem whose right-hand side is the
    current residual ``target - A(w)``. Stops once the weighted residual norm
    drops below ``tol`` relative to the norm of the target, or once it stalls
    at the rounding floor of its own evaluation (``at_floor`` in the
    diagnostics); the control is then re-simulated through the nonlinear scheme.
    """
    T = data.T if T is None else T
    grid, tgrid = data.grid(n_cells), TimeGrid(T, n_steps)
    x = grid.interior
    y0 = np.asarray(data.y0(x) if y0 is None else y0, dtype=float)
    p0 = np.asarray(data.p0(x) if p0 is None else p0, dtype=float)
    ops = LinearizedOperators.from_problem(data, grid, tgrid, placement, t0)
    if weights is None:
        weights = WeightFamily(WeightParams.default(T, data.domain, data.omega))
    system = assemble_variational(data, weights, ops, log_range=log_range)
    amap = NonlinearMap(data, ops)
    target_rows, target_init = amap.target(y0, p0)
    m = ops.m
    Y = np.zeros((ops.N + 1, 2 * m))
    v = np.zeros((ops.N + 1, m))
    ref = zeta_norm(system, target_rows, target_init)
    abs_L, abs_B = abs(system.L), abs(system.B)
    history, cg_iters = [], []
    increases = 0
    converged = at_floor = False
    for _ in range(max_iter + 1):
        rows, init = amap.apply(Y, v)
        r_rows, r_init = target_rows - rows, target_init - init
        if not (np.all(np.isfinite(r_rows)) and np.all(np.isfinite(r_init))):
            raise OutsideBasinError("residual became non-finite", history)
        history.append(zeta_norm(system, r_rows, r_init))
        if history[-1] <= tol * max(ref, 1e-300) or history[-1] == 0.0:
            converged = True
            break
        floor = _residual_floor(system, abs_L, abs_B, Y, v, rows.shape)
        if len(history) > 1 and history[-1] > 0.5 * history[-2] and history[-1] <= floor:
            # stalled where the residual can no longer be evaluated more accurately
            converged = at_floor = True
            break
        if len(history) > 1 and history[-1] > history[-2]:
            increases += 1
            if increases >= 3:
                raise OutsideBasinError(
                    "residual increased in 3 consecutive iterations; shrink the data", history)
        else:
            increases = 0
        if len(history) > max_iter:
            break
        f_lv = np.vstack([r_rows[:, :m], np.zeros(m)])
        g_lv = np.vstack([r_rows[:, m:], np.zeros(m)])
        dY, dv, res, _, _ = _solve_multiplier(system, f_lv, g_lv, r_init[:m], r_init[m:],
                                              cg_tol, "lu", None, refine_steps)
        cg_iters.append(res.iterations)
        Y += dY
        v += dv
    if not converged:
        if max(history) > history[0] or history[-1] >= history[0]:
            # a contracting iteration never climbs above its starting residual
            raise OutsideBasinError(
                f"no contraction within {max_iter} iterations; shrink the data", history)
        raise ControlError(f"no convergence in {max_iter} iterations", history)
    try:
        traj = solve_forward(data, tgrid, grid, v, placement, y0, p0, t0)
    except NonFiniteStateError as exc:
        raise OutsideBasinError(f"nonlinear re-simulation failed: {exc}", history) from exc
    diag = weighted_diagnostics(system, traj.y, traj.p, v)
    diag.update(iterations=len(history) - 1, cg_iterations=cg_iters, at_floor=at_floor,
                residual_history=list(history), reference_norm=ref,
                state_gap=float(np.max(np.abs(traj.y - Y[:, :m])) + np.max(np.abs(traj.p - Y[:, m:]))))
    sol = ControlSolution(tgrid.times + t0, grid, v, Y[:, :m], Y[:, m:], traj.y, traj.p, diag,
                          list(history), placement)
    ty, tp = sol.terminal_norms()
    diag.update(terminal_y=ty, terminal_p=tp)
    return sol


# ---------------------------------------------------------------------------
# large-time strategy


def h3_sq(u, grid: Grid1D, lap=None) -> float:
    """Discrete H3-type squared norm of an interior field."""
    lap = assemble_divergence_form(np.ones(grid.n_cells + 1), grid) if lap is None else lap
    h = grid.h
    d1 = nodal_gradient(grid.extend(u), h)
    d2 = lap @ u
    d3 = nodal_gradient(grid.extend(d2), h)
    return float(h * (u @ u + d1 @ d1 + d2 @ d2 + d3 @ d3))


def smallness_measure(y, p, t: float, data: ProblemData, grid: Grid1D) -> float:
    """``||y||_H3^2 + ||p||_H3^2 + ||z*(t)||^2`` with the boundary-potential term sampled."""
    x = grid.nodes
    zs = data.zstar
    z_terms = [zs.value(x, t), zs.space_grad(x, t), zs.laplacian(x, t)]
    if zs.third_deriv is not None:
        z_terms.append(zs.third_deriv(x, t))
    w = np.full(x.shape, grid.h)
    w[0] = w[-1] = grid.h / 2
    z_sq = float(sum(np.sum(w * np.asarray(c, float) ** 2) for c in z_terms))
    return h3_sq(y, grid) + h3_sq(p, grid) + z_sq


def large_time_control(data: ProblemData, T0: float, T: float, threshold: float = 1e-3,
                       n_cells: int = 128, steps_per_unit: int = 256, tol: float = 1e-8,
                       max_iter: int = 12, placement: str = "y") -> ControlSolution:
    """Wait uncontrolled on ``(0, T - T0)`` then control on ``(T - T0, T)``.

    The wait must bring the smallness measure below ``threshold``; otherwise an
    :class:`OutsideBasinError` reports the achieved value and the minimal
    waiting time predicted from an exponential fit of the measure.
    """
    from .simulator import fit_decay_rate

    if not (T > T0 > 0):
        raise ValueError("need T > T0 > 0")
    grid = data.grid(n_cells)
    x = grid.interior
    wait = T - T0
    n_wait = max(2, int(round(steps_per_unit * wait)))
    phase1 = solve_forward(data, TimeGrid(wait, n_wait), grid)
    measure = np.array([smallness_measure(phase1.y[k], phase1.p[k], phase1.t[k], data, grid)
                        for k in range(n_wait + 1)])
    achieved = float(measure[-1])
    rho_hat, r2, t_bar_min = float("nan"), float("nan"), 0.0
    if np.all(measure[n_wait // 2:] > 0):
        fit = fit_decay_rate((phase1.t, measure), (wait / 2, wait))
        rho_hat, r2 = fit.rho_hat, fit.r2
        if fit.rho_hat > 0:
            t_bar_min = max(0.0, float(np.log(fit.c_hat / threshold) / fit.rho_hat))
        else:
            t_bar_min = float("inf")
    if not achieved < threshold:
        raise OutsideBasinError(
            f"smallness measure {achieved:.3e} at t = {wait:g} is above {threshold:.3e}; "
            f"estimated minimal waiting time {t_bar_min:.3g}", [], achieved, t_bar_min)
    sol = liusternik_iterate(data, tol=tol, max_iter=max_iter, n_cells=n_cells,
                             n_steps=max(2, int(round(steps_per_unit * T0))), placement=placement,
                             y0=phase1.y[-1], p0=phase1.p[-1], t0=wait, T=T0)
    m = grid.n_interior
    times = np.concatenate([phase1.t, sol.times[1:]])
    v = np.vstack([np.zeros((n_wait + 1, m)), sol.v[1:]])
    y_sim = np.vstack([phase1.y, sol.y_sim[1:]])
    p_sim = np.vstack([phase1.p, sol.p_sim[1:]])
    y = np.vstack([phase1.y, sol.y[1:]])
    p = np.vstack([phase1.p, sol.p[1:]])
    diag = dict(sol.diagnostics)
    diag.update(wait=wait, threshold=threshold, achieved=achieved, t_bar_min=t_bar_min,
                decay_rate=rho_hat, decay_r2=r2,
                initial_norm=float(np.sqrt(grid.h * (phase1.y[0] @ phase1.y[0]))
                                   + np.sqrt(grid.h * (phase1.p[0] @ phase1.p[0]))))
    return ControlSolution(times, grid, v, y, p, y_sim, p_sim, diag, sol.history, placement)
