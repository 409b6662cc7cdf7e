"""Uniform 1D finite differences: grids, conservative operators and discrete norms.

Interior fields (``FieldVector``) are plain numpy arrays holding the values at
the ``n_cells - 1`` interior nodes; homogeneous Dirichlet values are implicit.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Grid1D:
    n_cells: int
    x_lo: float = 0.0
    x_hi: float = 1.0
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.n_cells) != self.n_cells or self.n_cells < 4:
            raise ValueError(f"n_cells >= 4 required, got {self.n_cells}")
        if not self.x_hi > self.x_lo:
            raise ValueError("x_hi must exceed x_lo")
        nodes = self.x_lo + self.h * np.arange(self.n_cells + 1)
        nodes[-1] = self.x_hi
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def h(self) -> float:
        return (self.x_hi - self.x_lo) / self.n_cells

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]

    @property
    def n_interior(self) -> int:
        return self.n_cells - 1

    def extend(self, u: np.ndarray) -> np.ndarray:
        """Pad interior values with the zero Dirichlet values (last axis)."""
        u = np.asarray(u, dtype=float)
        pad = [(0, 0)] * (u.ndim - 1) + [(1, 1)]
        return np.pad(u, pad)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int
    times: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        times = self.dt * np.arange(self.n_steps + 1)
        times[-1] = self.T
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def dt(self) -> float:
        return self.T / self.n_steps


def half_node_average(a_nodes: np.ndarray, mean: str = "arithmetic") -> np.ndarray:
    a_nodes = np.asarray(a_nodes, dtype=float)
    left, right = a_nodes[..., :-1], a_nodes[..., 1:]
    if mean == "arithmetic":
        return 0.5 * (left + right)
    if mean == "harmonic":
        return 2.0 * left * right / (left + right)
    raise ValueError(f"unknown mean {mean!r}")


def assemble_divergence_form(a_nodes, grid: Grid1D, mean: str = "arithmetic") -> sp.csr_matrix:
    """Matrix of ``u -> -(a u')'`` on interior nodes with zero Dirichlet data.

    ``a_nodes`` holds the coefficient at all ``n_cells + 1`` nodes. The result
    is symmetric positive definite whenever every coefficient is positive.
    """
    a_nodes = np.asarray(a_nodes, dtype=float)
    if a_nodes.shape != (grid.n_cells + 1,):
        raise ValueError(f"expected {grid.n_cells + 1} nodal coefficients, got {a_nodes.shape}")
    if not np.all(np.isfinite(a_nodes)) or np.any(a_nodes <= 0):
        bad = int(np.flatnonzero(~(a_nodes > 0))[0])
        raise ValueError(f"coefficient must be positive, got {a_nodes[bad]} at node {bad}")
    a_half = half_node_average(a_nodes, mean) / grid.h**2
    diag = a_half[:-1] + a_half[1:]
    off = -a_half[1:-1]
    return sp.diags([off, diag, off], [-1, 0, 1], format="csr")


def divergence_flux(a_nodes, u_nodes, h: float, mean: str = "arithmetic") -> np.ndarray:
    """Conservative ``(a u')'`` at interior nodes from full nodal arrays.

    Both arguments may carry leading batch axes; the last axis is space.
    """
    u_nodes = np.asarray(u_nodes, dtype=float)
    a_half = half_node_average(a_nodes, mean)
    flux = a_half * np.diff(u_nodes, axis=-1)
    return np.diff(flux, axis=-1) / h**2


def nodal_gradient(u_nodes, h: float) -> np.ndarray:
    """Second-order derivative of a full nodal field (last axis is space)."""
    u = np.asarray(u_nodes, dtype=float)
    g = np.empty_like(u)
    g[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * h)
    g[..., 0] = (-3 * u[..., 0] + 4 * u[..., 1] - u[..., 2]) / (2 * h)
    g[..., -1] = (3 * u[..., -1] - 4 * u[..., -2] + u[..., -3]) / (2 * h)
    return g


def gradient(u, grid: Grid1D) -> np.ndarray:
    """Nodal gradient of an interior field extended by zero boundary values."""
    return nodal_gradient(grid.extend(u), grid.h)


def gradient_matrix(grid: Grid1D) -> sp.csr_matrix:
    """Sparse map from interior values to the nodal gradient of :func:`gradient`."""
    n, h = grid.n_cells, grid.h
    rows, cols, vals = [], [], []
    # full nodal stencil, then drop the (zero) boundary columns
    for i in range(n + 1):
        if i == 0:
            stencil = [(0, -3.0), (1, 4.0), (2, -1.0)]
        elif i == n:
            stencil = [(n, 3.0), (n - 1, -4.0), (n - 2, 1.0)]
        else:
            stencil = [(i + 1, 1.0), (i - 1, -1.0)]
        for j, c in stencil:
            if 1 <= j <= n - 1:
                rows.append(i)
                cols.append(j - 1)
                vals.append(c / (2 * h))
    return sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, n - 1))


def l2_norm(u, grid: Grid1D) -> float:
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(grid.h * np.sum(u * u)))


def nodal_l2_norm(g, h: float) -> float:
    """Trapezoidal L2 norm of a full nodal field."""
    g = np.asarray(g, dtype=float)
    w = np.full(g.shape[-1], h)
    w[0] = w[-1] = 0.5 * h
    return float(np.sqrt(np.sum(w * g * g)))


def norms(u, grid: Grid1D) -> tuple[float, float, float]:
    """Return ``(l2, h1_semi, discrete_laplacian_l2)`` of an interior field."""
    u = np.asarray(u, dtype=float)
    lap = assemble_divergence_form(np.ones(grid.n_cells + 1), grid) @ u
    return l2_norm(u, grid), nodal_l2_norm(gradient(u, grid), grid.h), l2_norm(lap, grid)
