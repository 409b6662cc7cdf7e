"""Problem data for the thermistor system and sampled hypothesis checks.

The state is written in homogeneous form: ``p = z - z*`` so that both the
temperature ``y`` and the shifted potential ``p`` vanish on the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .discretization import Grid1D, divergence_flux, gradient, nodal_gradient

FD_STEP = 1e-6
BOUNDARY_TOL = 1e-12


class NonFiniteValueError(ValueError):
    """A sampled function returned NaN or inf."""


def _fd1(fun, u, step=FD_STEP):
    return (fun(u + step) - fun(u - step)) / (2 * step)


def _fd2(fun, u, step=1e-4):
    # wider step: the second difference loses ~half the digits
    return (fun(u + step) - 2 * fun(u) + fun(u - step)) / step**2


@dataclass(frozen=True)
class CoefficientLaw:
    """Scalar conductivity law with certified bounds.

    ``deriv1``/``deriv2`` are optional analytic derivatives; centered finite
    differences are used when they are missing.
    """

    eval: Callable[[np.ndarray], np.ndarray]
    lower_bound: float
    upper_bound: float
    deriv_bound: float
    deriv1: Optional[Callable[[np.ndarray], np.ndarray]] = None
    deriv2: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"

    def __call__(self, u):
        return self.eval(np.asarray(u, dtype=float))

    def d1(self, u):
        u = np.asarray(u, dtype=float)
        return self.deriv1(u) if self.deriv1 is not None else _fd1(self.eval, u)

    def d2(self, u):
        u = np.asarray(u, dtype=float)
        return self.deriv2(u) if self.deriv2 is not None else _fd2(self.eval, u)


def tanh_law(base: float = 1.0, amp: float = 0.25, lower=None, upper=None, deriv_bound=None):
    """``base + amp * tanh(u)``; bounds default to the exact range."""
    lower = base - abs(amp) if lower is None else lower
    upper = base + abs(amp) if upper is None else upper
    # max of sech^2 + |2 sech^2 tanh| over u is below 1.77
    deriv_bound = 1.77 * abs(amp) if deriv_bound is None else deriv_bound

    def d1(u):
        return amp / np.cosh(u) ** 2

    def d2(u):
        return -2.0 * amp * np.tanh(u) / np.cosh(u) ** 2

    return CoefficientLaw(lambda u: base + amp * np.tanh(u), lower, upper, deriv_bound,
                          d1, d2, name="tanh")


def constant_law(value: float = 1.0) -> CoefficientLaw:
    return CoefficientLaw(lambda u: np.full_like(np.asarray(u, dtype=float), value),
                          value, value, 1e-300,
                          lambda u: np.zeros_like(u), lambda u: np.zeros_like(u),
                          name="constant")


@dataclass(frozen=True)
class BoundaryPotential:
    """Boundary electric potential ``z*`` and the derivatives the model needs."""

    value: Callable
    time_deriv: Callable
    space_grad: Callable
    laplacian: Callable
    grad_time_deriv: Callable
    laplacian_time_deriv: Callable
    decay_amp: float
    decay_rate: float
    third_deriv: Optional[Callable] = None
    time_deriv2: Optional[Callable] = None
    name: str = "custom"

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"


def quadratic_potential(eps: float = 0.1, gamma: float = 1.0) -> BoundaryPotential:
    """``z*(x, t) = eps * exp(-gamma t) * x^2 / 2``."""

    def amp(t):
        return eps * np.exp(-gamma * np.asarray(t, dtype=float))

    def value(x, t):
        return amp(t) * np.asarray(x, dtype=float) ** 2 / 2

    def grad(x, t):
        return amp(t) * np.asarray(x, dtype=float)

    def lap(x, t):
        return amp(t) * np.ones_like(np.asarray(x, dtype=float))

    def zero(x, t):
        return 0.0 * np.asarray(x, dtype=float) * amp(t)

    # H^3(0,1) norm^2 of x^2/2 is 1/20 + 1/3 + 1; z*_t doubles it up to gamma^2
    c_star = 1.4 * eps**2 * (1 + gamma**2)
    return BoundaryPotential(
        value=value,
        time_deriv=lambda x, t: -gamma * value(x, t),
        space_grad=grad,
        laplacian=lap,
        grad_time_deriv=lambda x, t: -gamma * grad(x, t),
        laplacian_time_deriv=lambda x, t: -gamma * lap(x, t),
        decay_amp=c_star,
        decay_rate=gamma,
        third_deriv=zero,
        time_deriv2=lambda x, t: gamma**2 * value(x, t),
        name="quadratic",
    )


def zero_potential() -> BoundaryPotential:
    def z(x, t):
        return np.zeros(np.broadcast(np.asarray(x, float), np.asarray(t, float)).shape)

    return BoundaryPotential(z, z, z, z, z, z, 1.0, 1.0, z, z, name="zero")


def _zero_forcing(x, t):
    return np.zeros(np.broadcast(np.asarray(x, float), np.asarray(t, float)).shape)


@dataclass(frozen=True)
class ProblemData:
    """Continuous problem on an interval with a boundary-touching control region."""

    kappa: CoefficientLaw
    sigma: CoefficientLaw
    zstar: BoundaryPotential
    y0: Callable = lambda x: 0.0 * np.asarray(x, float)
    p0: Callable = lambda x: 0.0 * np.asarray(x, float)
    f: Callable = _zero_forcing
    g: Callable = _zero_forcing
    domain: tuple = (0.0, 1.0)
    T: float = 1.0
    omega: tuple = (0.7, 1.0)
    x0: float = 1.0
    t1: Optional[float] = None
    t2: Optional[float] = None
    scale: float = field(default=0.0, compare=False)

    def __post_init__(self):
        lo, hi = self.domain
        a, b = self.omega
        if not hi > lo:
            raise ValueError("empty domain")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if not (lo <= a < b <= hi):
            raise ValueError(f"control region {self.omega} not inside {self.domain}")
        if not (np.isclose(a, lo) or np.isclose(b, hi)):
            raise ValueError("control region must share an endpoint with the domain")
        if self.x0 not in (lo, hi) or not (np.isclose(self.x0, a) or np.isclose(self.x0, b)):
            raise ValueError("x0 must be a common boundary point of the domain and omega")
        t1 = 0.25 * self.T if self.t1 is None else self.t1
        t2 = 0.75 * self.T if self.t2 is None else self.t2
        if not (0 < t1 < t2 < self.T):
            raise ValueError("need 0 < t1 < t2 < T")
        object.__setattr__(self, "t1", t1)
        object.__setattr__(self, "t2", t2)
        for name in ("y0", "p0"):
            ends = np.asarray(getattr(self, name)(np.array([lo, hi])), dtype=float)
            if np.max(np.abs(ends)) > BOUNDARY_TOL:
                raise ValueError(f"{name} must vanish at both endpoints, got {ends}")

    def grid(self, n_cells: int) -> Grid1D:
        return Grid1D(n_cells, *self.domain)

    def omega_mask(self, x) -> np.ndarray:
        a, b = self.omega
        x = np.asarray(x, dtype=float)
        return (x > a) & (x < b)

    def with_(self, **changes) -> "ProblemData":
        from dataclasses import replace

        if "T" in changes:
            # keep the default observation window tied to the horizon
            changes.setdefault("t1", None)
            changes.setdefault("t2", None)
        return replace(self, **changes)


def default_problem(scale: float = 0.05, eps: float = 0.1, gamma: float = 1.0,
                    T: float = 1.0, omega=(0.7, 1.0), kappa=None, sigma=None) -> ProblemData:
    """Desk-scale scenario: unit interval, control on (0.7, 1), sine initial data."""
    kappa = kappa if kappa is not None else tanh_law(1.0, 0.25, 0.5, 2.0, 1.0)
    sigma = sigma if sigma is not None else tanh_law(1.0, 0.5, 0.5, 1.5, 1.0)
    zstar = quadratic_potential(eps, gamma) if eps != 0 else zero_potential()
    return ProblemData(
        kappa=kappa,
        sigma=sigma,
        zstar=zstar,
        y0=lambda x: scale * np.sin(np.pi * np.asarray(x, float)),
        p0=lambda x: scale * np.sin(2 * np.pi * np.asarray(x, float)),
        T=T,
        omega=tuple(omega),
        x0=float(omega[1]) if np.isclose(omega[1], 1.0) else float(omega[0]),
        scale=scale,
    )


def transform_to_homogeneous(z0, zstar: BoundaryPotential, grid: Grid1D) -> np.ndarray:
    """Shift a full nodal potential by ``z*(., 0)``; the result vanishes on the boundary."""
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != grid.nodes.shape:
        raise ValueError("z0 must be given at every grid node")
    p0 = z0 - zstar.value(grid.nodes, 0.0)
    ends = np.abs(p0[[0, -1]])
    if np.max(ends) > BOUNDARY_TOL:
        raise ValueError(f"z0 does not match z*(., 0) on the boundary (mismatch {ends.max():.3e})")
    p0[[0, -1]] = 0.0
    return p0


def nonlinear_rhs(y, p, t: float, data: ProblemData, grid: Grid1D):
    """Explicit source terms of the homogeneous system at time ``t``.

    Returns ``(rhs_y, rhs_p)`` on interior nodes, the divergence being taken in
    conservative form with nodal ``z*`` values.
    """
    x = grid.interior
    sig = data.sigma(np.asarray(y, dtype=float))
    dp = gradient(p, grid)[1:-1]
    dz = data.zstar.space_grad(x, t)
    rhs_y = sig * dp * dp + 2 * sig * dp * dz + sig * dz * dz + data.f(x, t)
    sig_nodes = data.sigma(grid.extend(y))
    rhs_p = (divergence_flux(sig_nodes, data.zstar.value(grid.nodes, t), grid.h)
             - data.zstar.time_deriv(x, t) + data.g(x, t))
    return rhs_y, rhs_p


# ---------------------------------------------------------------------------
# hypothesis validation


@dataclass
class HypothesisCheck:
    name: str
    passed: bool
    worst_value: float
    bound: float
    worst_at: tuple = ()
    note: str = ""


@dataclass
class ValidationReport:
    checks: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def __getitem__(self, key) -> HypothesisCheck:
        return self.checks[key]

    def failures(self) -> list:
        return [c for c in self.checks.values() if not c.passed]

    def summary(self) -> str:
        lines = []
        for c in self.checks.values():
            flag = "PASS" if c.passed else "FAIL"
            lines.append(f"{c.name:4s} {flag}  worst={c.worst_value:.4g} bound={c.bound:.4g} "
                         f"at={c.worst_at} {c.note}".rstrip())
        return "\n".join(lines)


def _finite(values, what: str, points) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    bad = ~np.isfinite(values)
    if np.any(bad):
        idx = np.unravel_index(int(np.flatnonzero(bad)[0]), values.shape)
        where = tuple(float(np.asarray(p)[i]) for p, i in zip(points, idx)) if points else idx
        raise NonFiniteValueError(f"{what} is not finite at {where}")
    return values


def _h3_surrogate(zstar_fn, lap_fn, third_fn, grad_fn, x, t, h):
    """Discrete H^3 norm^2 of a potential at time ``t`` (trapezoidal sums)."""
    w = np.full(x.shape, h)
    w[0] = w[-1] = h / 2
    v, d1, d2 = zstar_fn(x, t), grad_fn(x, t), lap_fn(x, t)
    d3 = third_fn(x, t) if third_fn is not None else nodal_gradient(d2, h)
    return float(np.sum(w * (v * v + d1 * d1 + d2 * d2 + d3 * d3)))


def _law_checks(law: CoefficientLaw, label: str, u):
    vals = _finite(law(u), f"{label}(u)", (u,))
    d1 = _finite(law.d1(u), f"{label}'(u)", (u,))
    d2 = _finite(law.d2(u), f"{label}''(u)", (u,))
    below = law.lower_bound - vals
    above = vals - law.upper_bound
    i_lo, i_hi = int(np.argmax(below)), int(np.argmax(above))
    if below[i_lo] >= above[i_hi]:
        range_worst, range_at, range_bound = vals[i_lo], (float(u[i_lo]),), law.lower_bound
    else:
        range_worst, range_at, range_bound = vals[i_hi], (float(u[i_hi]),), law.upper_bound
    range_ok = bool(np.all(below <= 0) and np.all(above <= 0))
    dsum = np.abs(d1) + np.abs(d2)
    i_d = int(np.argmax(dsum))
    return (range_ok, range_worst, range_bound, range_at), (float(dsum[i_d]), (float(u[i_d]),))


def validate_hypotheses(data: ProblemData, n_samples: int = 1001, u_range=(-5.0, 5.0),
                        weights=None) -> ValidationReport:
    """Check H1-H10 on sampled points and report the worst sample of each.

    ``weights`` optionally supplies a :class:`thermistor.carleman.WeightFamily`
    used for the weighted integrability surrogate of H9; the default family is
    built otherwise.
    """
    if n_samples < 2:
        raise ValueError("n_samples >= 2 required")
    u = np.linspace(u_range[0], u_range[1], n_samples)
    lo, hi = data.domain
    x = np.linspace(lo, hi, n_samples)
    h = (hi - lo) / (n_samples - 1)
    t = np.linspace(0.0, data.T, n_samples)
    z = data.zstar
    checks = {}

    # H1: finite sampled L2 norms of f, g, their time derivatives, and w(0) in H^1_0
    worst, at, ok = 0.0, (), True
    for label, fun in (("f", data.f), ("g", data.g)):
        X, Tt = np.meshgrid(x, t, indexing="ij")
        vals = _finite(fun(X, Tt), label, (x, t))
        dt_vals = _finite((fun(X, Tt + FD_STEP) - fun(X, Tt - FD_STEP)) / (2 * FD_STEP),
                          f"{label}_t", (x, t))
        norm = float(np.sqrt(h * data.T / n_samples * (np.sum(vals**2) + np.sum(dt_vals**2))))
        trace = float(np.max(np.abs(vals[[0, -1], 0])))
        if trace > worst:
            worst, at = trace, (label, 0.0)
        ok &= np.isfinite(norm) and trace <= BOUNDARY_TOL
    checks["H1"] = HypothesisCheck("H1", bool(ok), worst, BOUNDARY_TOL, at,
                                   "finite sampled norms; boundary trace of f(0), g(0)")

    # H2/H3: decay of the discrete H^3 surrogate of z* and z*_t
    third = z.third_deriv
    third_t = None if third is None else (
        lambda xx, tt: (third(xx, tt + FD_STEP) - third(xx, tt - FD_STEP)) / (2 * FD_STEP))
    t_long = np.linspace(0.0, max(data.T, 10.0 / z.decay_rate), n_samples)
    h3 = np.array([
        _h3_surrogate(z.value, z.laplacian, third, z.space_grad, x, tt, h)
        + _h3_surrogate(z.time_deriv, z.laplacian_time_deriv, third_t, z.grad_time_deriv, x, tt, h)
        for tt in t_long])
    h3 = _finite(h3, "z* H^3 surrogate", (t_long,))
    integral = float(np.trapezoid(h3, t_long))
    checks["H2"] = HypothesisCheck("H2", bool(np.isfinite(integral)), integral, np.inf, (),
                                   "integral of the H^3 surrogate over the sampled window")
    ratio = h3 / (z.decay_amp * np.exp(-z.decay_rate * t_long))
    i = int(np.argmax(ratio))
    checks["H3"] = HypothesisCheck("H3", bool(ratio[i] <= 1.0), float(h3[i]),
                                   float(z.decay_amp * np.exp(-z.decay_rate * t_long[i])),
                                   (float(t_long[i]),))

    # H4-H6: coefficient laws
    (rk, wk, bk, ak), (dk, adk) = _law_checks(data.kappa, "kappa", u)
    (rs, ws, bs, as_), (ds, ads) = _law_checks(data.sigma, "sigma", u)
    checks["H4"] = HypothesisCheck("H4", True, max(dk, ds), np.inf, (),
                                   "first and second derivatives finite at every sample")
    if not rk:
        checks["H5"] = HypothesisCheck("H5", False, wk, bk, ak, "kappa out of bounds")
    elif not rs:
        checks["H5"] = HypothesisCheck("H5", False, ws, bs, as_, "sigma out of bounds")
    else:
        checks["H5"] = HypothesisCheck("H5", True, min(wk, ws), min(bk, bs), ak)
    m_total = data.kappa.deriv_bound + data.sigma.deriv_bound
    ok6 = dk <= data.kappa.deriv_bound and ds <= data.sigma.deriv_bound
    checks["H6"] = HypothesisCheck("H6", bool(ok6), dk + ds, m_total,
                                   adk if dk / data.kappa.deriv_bound >= ds / data.sigma.deriv_bound
                                   else ads)

    # H7: W^{2,inf} surrogate
    X, Tt = np.meshgrid(x, t, indexing="ij")
    sup = max(float(np.max(np.abs(_finite(fn(X, Tt), name, (x, t)))))
              for name, fn in (("z*", z.value), ("grad z*", z.space_grad),
                               ("lap z*", z.laplacian), ("z*_t", z.time_deriv),
                               ("grad z*_t", z.grad_time_deriv)))
    checks["H7"] = HypothesisCheck("H7", bool(np.isfinite(sup)), sup, np.inf, (),
                                   "sup of z* and its derivatives")

    # H8: nonvanishing normal derivative at x0 on [t1, t2]
    nu = 1.0 if np.isclose(data.x0, hi) else -1.0
    tw = np.linspace(data.t1, data.t2, n_samples)
    normal = np.abs(_finite(z.space_grad(np.full_like(tw, data.x0), tw) * nu,
                            "grad z* . nu", (tw,)))
    j = int(np.argmin(normal))
    checks["H8"] = HypothesisCheck("H8", bool(normal[j] > BOUNDARY_TOL), float(normal[j]),
                                   BOUNDARY_TOL, (data.x0, float(tw[j])),
                                   "min |grad z*(x0,t).nu| on [t1,t2]")

    # H9: weighted integrability with the clamped weight rho
    if weights is None:
        from .carleman import WeightFamily, WeightParams

        weights = WeightFamily(WeightParams.default(data.T, data.domain, data.omega))
    t_in = t[:-1]
    log_rho = np.array([weights.log_weights(tt)["rho"] for tt in t_in])
    rho = np.exp(np.clip(log_rho - log_rho.min(), -weights.clamp, weights.clamp) / 2)
    X, Tt = np.meshgrid(x, t_in, indexing="ij")
    terms = {
        "|grad z*|^2": z.space_grad(X, Tt) ** 2,
        "|grad z*_t|^2": z.grad_time_deriv(X, Tt) ** 2,
        "lap z*": z.laplacian(X, Tt),
        "lap z*_t": z.laplacian_time_deriv(X, Tt),
        "z*_t": z.time_deriv(X, Tt),
        "z*_tt": (z.time_deriv2(X, Tt) if z.time_deriv2 is not None
                  else (z.time_deriv(X, Tt + FD_STEP) - z.time_deriv(X, Tt - FD_STEP)) / (2 * FD_STEP)),
    }
    worst9, name9 = 0.0, ""
    for name, vals in terms.items():
        val = float(np.sqrt(h * data.T / n_samples * np.sum((rho * _finite(vals, name, (x, t_in))) ** 2)))
        if not val <= worst9:
            worst9, name9 = val, name
    checks["H9"] = HypothesisCheck("H9", bool(np.isfinite(worst9)), worst9, np.inf, (name9,),
                                   "clamped weighted L2 norms (normalized weight)")

    # H10: H^1_0 membership of |grad z*(0)|^2 and sigma(0) lap z*(0) - z*_t(0)
    s0 = float(data.sigma(0.0))
    worst10, at10 = 0.0, ()
    ok10 = True
    for name, vals in (("|grad z*(0)|^2", z.space_grad(x, 0.0) ** 2),
                       ("sigma(0) lap z*(0) - z*_t(0)", s0 * z.laplacian(x, 0.0) - z.time_deriv(x, 0.0))):
        vals = _finite(vals, name, (x,))
        ok10 &= np.isfinite(nodal_gradient(vals, h)).all()
        trace = float(np.max(np.abs(vals[[0, -1]])))
        if trace > worst10:
            worst10, at10 = trace, (name,)
    checks["H10"] = HypothesisCheck("H10", bool(ok10 and worst10 <= BOUNDARY_TOL), worst10,
                                    BOUNDARY_TOL, at10, "finite H^1 surrogate and zero boundary trace")
    return ValidationReport(checks)
