"""Carleman weights for the adjoint system and an empirical observability check.

Every exponential weight is handled through its logarithm; exponents are
clamped to ``[-clamp, clamp]`` only at the moment of exponentiation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

CLAMP = 600.0
LOG2 = np.log(2.0)
RHO_NAMES = ("rho", "rho0", "rho1", "rho2", "rho3", "rho4", "rho5", "rho6")


def tau_star(tau1: float, tau2: float) -> float:
    return max(2 * tau2 - tau1 + 7, 1 - tau1, 4 * tau2 - 3 * tau1 + 15, tau2 + 7)


@dataclass(frozen=True)
class Eta0:
    """Fursikov auxiliary function with certified extrema."""

    fn: Callable
    grad: Callable
    sup: float
    inf: float

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))


def build_eta0(domain=(0.0, 1.0), omega=(0.7, 1.0)) -> Eta0:
    """``eta0 = 2 - ((x - x_hi)/L)^2``: positive, with nonzero slope off the right end."""
    lo, hi = domain
    a, b = omega
    if not np.isclose(b, hi) or not (lo < a < hi):
        raise ValueError("build_eta0 needs omega = (a, x_hi) with x_lo < a < x_hi; "
                         "supply eta0 explicitly for other geometries")
    length = hi - lo
    return Eta0(
        fn=lambda x: 2.0 - ((x - hi) / length) ** 2,
        grad=lambda x: -2.0 * (np.asarray(x, float) - hi) / length**2,
        sup=2.0,
        inf=1.0,
    )


def smoothstep(u):
    """C-infinity step: 0 for u <= 0, 1 for u >= 1."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    out[u >= 1] = 1.0
    mid = (u > 0) & (u < 1)
    um = u[mid]
    a = np.exp(-1.0 / um)
    b = np.exp(-1.0 / (1.0 - um))
    out[mid] = a / (a + b)
    return out


@dataclass(frozen=True)
class WeightParams:
    lam: float
    s: float
    K: float
    tau1: float
    tau2: float
    T: float
    eta0: Eta0
    C0: float = 1.0

    def __post_init__(self):
        if not (self.lam > 0 and self.s > 0 and self.T > 0):
            raise ValueError("lambda, s and T must be positive")
        if self.K < self.eta0.sup + 2 * LOG2 - 1e-12:
            raise ValueError(f"K = {self.K} below ||eta0||_inf + 2 log 2 = {self.eta0.sup + 2 * LOG2}")
        if not abs(self.tau1 - self.tau2) < 1:
            raise ValueError("|tau1 - tau2| < 1 required")
        if self.s < self.s0 - 1e-12:
            raise ValueError(f"s = {self.s} below s0 = C0 (T + T^2) = {self.s0}")

    @property
    def s0(self) -> float:
        return self.C0 * (self.T + self.T**2)

    @property
    def tau_star(self) -> float:
        return tau_star(self.tau1, self.tau2)

    @classmethod
    def default(cls, T=1.0, domain=(0.0, 1.0), omega=(0.7, 1.0), lam=0.2, C0=1.0,
                s_mult=1.5, tau1=3.0, tau2=3.0, eta0=None) -> "WeightParams":
        eta0 = eta0 if eta0 is not None else build_eta0(domain, omega)
        s = s_mult * C0 * (T + T**2)
        return cls(lam, s, eta0.sup + 2 * LOG2, tau1, tau2, T, eta0, C0)


class WeightFamily:
    """Evaluators for alpha, xi, their barred versions and the rho family."""

    def __init__(self, params: WeightParams, clamp: float = CLAMP):
        self.params = params
        self.clamp = clamp
        p = params
        self._e2lk = np.exp(2 * p.lam * p.K)
        self._emax = np.exp(p.lam * p.eta0.sup)
        self._emin = np.exp(p.lam * p.eta0.inf)

    # -- time reparametrization
    def m(self, t):
        T = self.params.T
        t = np.asarray(t, dtype=float)
        theta = smoothstep((t - 0.3 * T) / (0.2 * T))
        return T**2 / 8 + (t * (T - t) - T**2 / 8) * theta

    # -- pointwise weights
    def alpha(self, x, t):
        t = self._check_open(t)
        return (self._e2lk - np.exp(self.params.lam * self.params.eta0(x))) / (t * (self.params.T - t))

    def xi(self, x, t):
        t = self._check_open(t)
        return np.exp(self.params.lam * self.params.eta0(x)) / (t * (self.params.T - t))

    def alpha_bar(self, x, t):
        return (self._e2lk - np.exp(self.params.lam * self.params.eta0(x))) / self.m(self._check_half_open(t))

    def xi_bar(self, x, t):
        return np.exp(self.params.lam * self.params.eta0(x)) / self.m(self._check_half_open(t))

    def _check_open(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0) or np.any(t >= self.params.T):
            raise ValueError("unbarred weights need 0 < t < T")
        return t

    def _check_half_open(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t >= self.params.T):
            raise ValueError("barred weights need 0 <= t < T")
        return t

    # -- extrema in x (alpha decreases and xi increases with eta0)
    def extrema(self, t) -> dict:
        t = self._check_open(t)
        q = 1.0 / (t * (self.params.T - t))
        a_plus = (self._e2lk - self._emin) * q
        a_minus = (self._e2lk - self._emax) * q
        return {"alpha+": a_plus, "alpha-": a_minus, "xi+": self._emax * q, "xi-": self._emin * q,
                "alpha_hat": 4 * a_minus - 3 * a_plus}

    def barred_extrema(self, t) -> dict:
        q = 1.0 / self.m(self._check_half_open(t))
        a_plus = (self._e2lk - self._emin) * q
        a_minus = (self._e2lk - self._emax) * q
        return {"alpha_bar+": a_plus, "alpha_bar-": a_minus, "xi_bar+": self._emax * q,
                "xi_bar-": self._emin * q, "alpha_hat_bar": 4 * a_minus - 3 * a_plus,
                "beta+": a_plus / 2, "beta-": a_minus / 2}

    def log_weights(self, t) -> dict:
        """Logarithms of rho, rho0 ... rho6 at ``t`` (scalar or array, 0 <= t < T)."""
        p = self.params
        e = self.barred_extrema(t)
        lx = np.log(e["xi_bar+"])
        ts = p.tau_star
        out = {
            "rho": 2.5 * p.s * e["beta-"] - 0.5 * (3 - ts) * lx,
            "rho0": 2 * p.s * e["beta+"] - 0.5 * (3 + p.tau2) * lx,
            "rho1": p.s * e["alpha_hat_bar"] - 0.5 * ts * lx,
        }
        for k in range(5):
            out[f"rho{k + 2}"] = p.s * e["alpha_hat_bar"] - 0.5 * (ts + 8 + 2 * k) * lx
        return out

    def log_weight_table(self, times) -> dict:
        """Log weights on a time grid; the terminal node ``t = T`` maps to ``+inf``."""
        times = np.asarray(times, dtype=float)
        inside = times < self.params.T
        out = {}
        lw = self.log_weights(times[inside])
        for name, vals in lw.items():
            col = np.full(times.shape, np.inf)
            col[inside] = vals
            out[name] = col
        return out

    def exp_clamped(self, exponent):
        exponent = np.asarray(exponent, dtype=float)
        return np.exp(np.clip(exponent, -self.clamp, self.clamp))


@dataclass
class WeightSample:
    x: float
    t: float
    values: dict

    def __getitem__(self, key):
        return self.values[key]


def eval_weights(params: WeightParams, x: float, t: float, barred_only: bool = False) -> WeightSample:
    """All weight values at ``(x, t)``; the rho family is returned as logarithms."""
    fam = WeightFamily(params)
    vals = {"m": float(fam.m(t)), "alpha_bar": float(fam.alpha_bar(x, t)),
            "xi_bar": float(fam.xi_bar(x, t))}
    vals.update({k: float(v) for k, v in fam.barred_extrema(t).items()})
    vals["beta"] = vals["alpha_bar"] / 2
    if not barred_only:
        vals["alpha"] = float(fam.alpha(x, t))
        vals["xi"] = float(fam.xi(x, t))
        vals.update({k: float(v) for k, v in fam.extrema(t).items()})
    vals.update({f"log_{k}": float(v) for k, v in fam.log_weights(t).items()})
    return WeightSample(float(x), float(t), vals)


# ---------------------------------------------------------------------------
# inequality checks


@dataclass
class InequalityCheck:
    name: str
    passed: bool
    sup_log_ratio: float
    note: str = ""


def _sample_times(T, n):
    uniform = np.linspace(0.0, T, n + 2)[1:-1]
    tail = T - T * np.logspace(-1, -6, 11)
    return np.union1d(uniform, tail)


def check_weight_inequalities(params: WeightParams, n_time_samples: int = 256) -> dict:
    """Empirical constants for the weight comparisons used by the control argument.

    For each inequality ``w1 <= C w2`` the smallest admissible ``log C`` over the
    samples is returned. A check passes when that value is finite and the
    log-ratio does not increase along the geometric approach ``t -> T``.
    """
    if n_time_samples < 16:
        raise ValueError("n_time_samples >= 16 required")
    fam = WeightFamily(params)
    T = params.T
    t = _sample_times(T, n_time_samples)
    lw = fam.log_weights(t)
    step = T / 1e4
    tt = np.clip(t, step, T - 2 * step)
    lw_p, lw_m = fam.log_weights(tt + step), fam.log_weights(tt - step)
    tail = t >= T - T * 0.1 - 1e-15
    out = {}

    def record(name, diff, note=""):
        diff = np.asarray(diff, dtype=float)
        sup = float(np.max(diff))
        d_tail = diff[tail]
        ok = bool(np.isfinite(sup) and np.all(np.diff(d_tail[-6:]) <= 1e-9 * (1 + np.abs(d_tail[-6:-1]))))
        out[name] = InequalityCheck(name, ok, sup, note)

    seq = ["rho0", "rho1", "rho2", "rho3", "rho4", "rho5", "rho6"]
    for k in range(6):
        record(f"{seq[k + 1]}<=C{seq[k]}", lw[seq[k + 1]] - lw[seq[k]])
        record(f"{seq[k]}<=Crho", lw[seq[k]] - lw["rho"])
    for k in range(5):
        a, b = f"rho{k + 2}", f"rho{k + 1}"
        dlog = (lw_p[a] - lw_m[a]) / (2 * step)
        with np.errstate(divide="ignore"):
            record(f"{a}*{a}_t<=C{b}^2", 2 * lw[a] + np.log(np.abs(dlog)) - 2 * lw[b],
                   "time derivative by centered differences")

    e = fam.barred_extrema(t)
    lower = 5 * e["beta-"] - 4 * e["beta+"]
    upper = 75 / 16 * e["beta+"] - 5 * e["beta-"]
    margin = float(min(np.min(lower), np.min(upper)) / np.max(e["beta+"]))
    out["remark_chain"] = InequalityCheck("remark_chain", bool(np.all(lower > 0) and np.all(upper > 0)),
                                          margin, "4 beta+ < 5 beta- < 75/16 beta+")
    out["alpha_hat_bar>0"] = InequalityCheck("alpha_hat_bar>0", bool(np.all(e["alpha_hat_bar"] > 0)),
                                             float(np.min(e["alpha_hat_bar"])))
    return out


def check_window_condition(params: WeightParams, t1: float, t2: float, x,
                           exponents=(-2, 0, 2, 4), n_t: int = 200) -> dict:
    """Sample the time-window dominance condition tying ``(t1, t2)`` to the weights.

    For every shift ``a`` the weight ``(s xi)^(tau+a) exp(-2 s alpha)`` outside
    ``[t1, t2]`` must not exceed its values inside. Returns the worst
    log-excess per ``(tau, a)`` (nonpositive means satisfied).
    """
    fam = WeightFamily(params)
    T = params.T
    x = np.asarray(x, dtype=float)[:, None]
    inside = np.linspace(t1, t2, n_t)[None, :]
    outside = np.concatenate([np.linspace(0, t1, n_t + 1)[1:-1], np.linspace(t2, T, n_t + 1)[1:-1]])[None, :]
    s = params.s
    result = {}
    for tau in (params.tau1, params.tau2):
        for a in exponents:
            def logw(tt):
                return (tau + a) * np.log(s * fam.xi(x, tt)) - 2 * s * fam.alpha(x, tt)

            excess = np.max(logw(outside), axis=1) - np.min(logw(inside), axis=1)
            result[(tau, a)] = float(np.max(excess))
    return result


def carleman_integral(params: WeightParams, tau: float, phi, grid, times) -> float:
    """Weighted quadrature of ``I(tau, phi)`` (trapezoid in t, midpoint in x).

    ``phi`` has shape ``(n_times, n_interior)``; values at ``t = 0`` and
    ``t = T`` carry zero weight.
    """
    from .discretization import assemble_divergence_form

    fam = WeightFamily(params)
    phi = np.asarray(phi, dtype=float)
    times = np.asarray(times, dtype=float)
    full = grid.extend(phi)
    mids = 0.5 * (grid.nodes[1:] + grid.nodes[:-1])
    lap = -(assemble_divergence_form(np.ones(grid.n_cells + 1), grid) @ phi.T).T
    phi_t = np.gradient(phi, times, axis=0)
    vals = np.zeros(len(times))
    s, lam = params.s, params.lam
    for k in range(1, len(times) - 1):
        t = times[k]
        xi_mid = fam.xi(mids, t)
        w_mid = np.exp((tau - 1) * np.log(s * xi_mid) - 2 * s * fam.alpha(mids, t))
        u_mid = 0.5 * (full[k, 1:] + full[k, :-1])
        du_mid = np.diff(full[k]) / grid.h
        xi_i = fam.xi(grid.interior, t)
        w_i = np.exp((tau - 1) * np.log(s * xi_i) - 2 * s * fam.alpha(grid.interior, t))
        vals[k] = grid.h * (np.sum(w_mid * ((s * lam * xi_mid) ** 2 * du_mid**2
                                            + (s * lam * xi_mid) ** 4 * u_mid**2))
                            + np.sum(w_i * (phi_t[k] ** 2 + lap[k] ** 2)))
    return float(np.trapezoid(vals, times))


def weight_profile(params: WeightParams, times) -> dict:
    """Columns ``t, log rho, log rho0 ... log rho6`` for export."""
    table = WeightFamily(params).log_weight_table(times)
    return {"t": np.asarray(times, dtype=float), **{f"log_{k}": table[k] for k in RHO_NAMES}}


# ---------------------------------------------------------------------------
# observability


@dataclass
class ObservabilityEstimate:
    c_obs_max: float
    ratios: np.ndarray
    flagged: list
    skipped: list


def estimate_observability_constant(adjoint_solver, n_interior: int, h: float, dt: float,
                                    omega_mask, n_random_terminals: int = 50,
                                    rng=None) -> ObservabilityEstimate:
    """Max over random terminal data of ``(|phi(0)|^2 + |psi(0)|^2) / int_omega |phi|^2``.

    ``adjoint_solver(phiT, psiT)`` returns ``(phi, psi)`` trajectories of shape
    ``(n_times, n_interior)`` ordered from ``t = 0`` to ``t = T``.
    """
    if n_random_terminals < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(rng)
    mask = np.asarray(omega_mask, dtype=bool)
    ratios, flagged, skipped = [], [], []
    for k in range(n_random_terminals):
        phiT = rng.standard_normal(n_interior)
        psiT = rng.standard_normal(n_interior)
        nrm = np.sqrt(h * (phiT @ phiT + psiT @ psiT))
        phiT, psiT = phiT / nrm, psiT / nrm
        try:
            phi, psi = adjoint_solver(phiT, psiT)
        except FloatingPointError as exc:
            skipped.append((k, str(exc)))
            continue
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(psi))):
            skipped.append((k, "non-finite adjoint state"))
            continue
        num = h * (phi[0] @ phi[0] + psi[0] @ psi[0])
        w = np.full(phi.shape[0], dt)
        w[0] = w[-1] = dt / 2
        den = h * float(np.sum(w[:, None] * phi[:, mask] ** 2))
        if den < 1e-14:
            flagged.append(k)
            continue
        ratios.append(num / den)
    ratios = np.asarray(ratios)
    return ObservabilityEstimate(float(np.max(ratios)) if len(ratios) else np.nan, ratios,
                                 flagged, skipped)
