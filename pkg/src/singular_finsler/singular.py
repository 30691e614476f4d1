"""Regularised singular problems  -Delta_p^H u = f u^{-gamma} + h u^theta.

The regularisation at level eps > 0 replaces the right-hand side by

    T_{1/eps}(f) / (u^+ + eps)^gamma + T_{1/eps}(h) T_{1/eps}((u^+)^theta)

so the index n of the truncated problems is identified with 1/eps.  The nodal
system is G(u) = A(u) - b(u) = 0 on interior nodes, with A the energy gradient
and b the lumped right-hand side.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize

from .finsler import FinslerSpec
from .grid_fem import (
    DiscreteField,
    Domain,
    Grid,
    StripIntegral,
    build_grid,
    energy,
    energy_gradient,
    energy_gradient_abs,
    energy_hessian,
    lumped_mass,
    seminorm_p,
    strip_integral,
)
from .newton import damped_newton, relative_residual

log = logging.getLogger(__name__)

DATA_KINDS = ("constant", "dist_power", "table")
ROUNDOFF_FACTOR = 16.0


@dataclass(frozen=True, eq=False)
class DataSpec:
    """A coefficient field: constant c, c * d(x)^{-sigma}, or tabulated nodal values."""

    kind: str = "constant"
    value: float = 1.0
    sigma: float = 0.0
    values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ValueError(f"unknown data kind {self.kind!r}")
        if self.kind == "table":
            if self.values is None:
                raise ValueError("table data needs values")
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @classmethod
    def constant(cls, c: float) -> "DataSpec":
        return cls("constant", float(c))

    @classmethod
    def dist_power(cls, sigma: float, scale: float = 1.0) -> "DataSpec":
        return cls("dist_power", float(scale), float(sigma))

    @classmethod
    def table(cls, values) -> "DataSpec":
        return cls("table", values=tuple(np.asarray(values, dtype=float)))

    def nodal(self, grid: Grid) -> np.ndarray:
        """Nodal values; d^{-sigma} is +inf on the boundary when sigma > 0."""
        if self.kind == "constant":
            return np.full(grid.n_vertices, self.value)
        if self.kind == "dist_power":
            with np.errstate(divide="ignore"):
                return self.value * grid.distance ** (-self.sigma)
        vals = np.asarray(self.values)
        if vals.shape != (grid.n_vertices,):
            raise ValueError("tabulated data does not match the grid")
        return vals.copy()

    def at(self, nodal_interp: np.ndarray, dist: np.ndarray) -> np.ndarray:
        """Pointwise values at sample points, given the interpolated table and distances."""
        if self.kind == "constant":
            return np.full_like(dist, self.value)
        if self.kind == "dist_power":
            return self.value * dist ** (-self.sigma)
        return nodal_interp

    def is_zero(self) -> bool:
        if self.kind == "table":
            return not any(self.values)
        return self.value == 0

    def min_value(self) -> float:
        if self.kind == "table":
            return min(self.values)
        return self.value

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "dist_power":
            return {"kind": "dist_power", "sigma": self.sigma, "scale": self.value}
        return {"kind": "table", "values": list(self.values)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DataSpec":
        kind = d.get("kind", "constant")
        if kind == "constant":
            return cls.constant(d.get("value", 1.0))
        if kind == "dist_power":
            return cls.dist_power(d["sigma"], d.get("scale", 1.0))
        return cls.table(d["values"])


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    p: float
    gamma: float
    theta: float = 0.0
    norm: FinslerSpec | None = None
    f: DataSpec = field(default_factory=lambda: DataSpec.constant(1.0))
    h: DataSpec = field(default_factory=lambda: DataSpec.constant(0.0))
    domain: Domain = field(default_factory=Domain.interval)
    resolution: int | tuple[int, ...] = 64
    min_cell: float | None = None

    def __post_init__(self):
        if self.norm is None:
            object.__setattr__(self, "norm", FinslerSpec.euclidean(self.domain.dim))
        if not self.p > 1:
            raise ValueError("p must be > 1")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not (0 <= self.theta < self.p - 1):
            raise ValueError("theta must satisfy 0 <= theta < p - 1")
        if self.norm.dim != self.domain.dim:
            raise ValueError("norm dimension does not match the domain")
        if self.f.min_value() < 0 or self.h.min_value() < 0:
            raise ValueError("f and h must be nonnegative")

    def with_(self, **changes) -> "ProblemSpec":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return ProblemSpec(**d)

    def grid(self) -> Grid:
        return build_grid(self.domain, self.resolution, min_cell=self.min_cell)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "p": self.p,
            "gamma": self.gamma,
            "theta": self.theta,
            "norm": self.norm.to_dict(),
            "f": self.f.to_dict(),
            "h": self.h.to_dict(),
            "domain": self.domain.to_dict(),
            "resolution": self.resolution if isinstance(self.resolution, int) else list(self.resolution),
        }
        if self.min_cell is not None:
            d["min_cell"] = self.min_cell
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ProblemSpec":
        domain = Domain.from_dict(d.get("domain", {"kind": "interval", "length": 1.0}))
        norm_d = dict(d.get("norm", {"kind": "euclidean"}))
        norm_d.setdefault("dim", domain.dim)
        res = d.get("resolution", 64)
        return cls(
            p=float(d["p"]),
            gamma=float(d["gamma"]),
            theta=float(d.get("theta", 0.0)),
            norm=FinslerSpec.from_dict(norm_d),
            f=DataSpec.from_dict(d.get("f", {"kind": "constant", "value": 1.0})),
            h=DataSpec.from_dict(d.get("h", {"kind": "constant", "value": 0.0})),
            domain=domain,
            resolution=res if isinstance(res, int) else tuple(res),
            min_cell=d.get("min_cell"),
        )


@dataclass
class SolveReport:
    u: DiscreteField
    epsilon: float
    newton_iters: int
    final_residual: float
    energy_value: float
    seminorm: float
    min_u_interior: float
    nehari_defect: float | None
    converged: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "newton_iters": self.newton_iters,
            "final_residual": self.final_residual,
            "energy_value": self.energy_value,
            "seminorm": self.seminorm,
            "min_u_interior": self.min_u_interior,
            "nehari_defect": self.nehari_defect,
            "converged": self.converged,
        }


class _Regularised:
    """Lumped right-hand side of the eps-problem and its derivative."""

    def __init__(self, problem: ProblemSpec, grid: Grid, eps: float, tol: float = 1e-10):
        if not eps > 0:
            raise ValueError("epsilon must be > 0")
        self.problem, self.grid, self.eps, self.tol = problem, grid, float(eps), float(tol)
        self.w = lumped_mass(grid).weights
        cap = 1.0 / eps
        self.fT = np.minimum(problem.f.nodal(grid), cap)
        self.hT = np.minimum(problem.h.nodal(grid), cap)
        self.cap = cap

    def rhs(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g, th, eps = self.problem.gamma, self.problem.theta, self.eps
        up = np.maximum(u, 0.0)
        pos = u > 0
        sing = self.fT / (up + eps) ** g
        dsing = np.where(pos, -g * self.fT / (up + eps) ** (g + 1), 0.0)
        if th == 0:
            pw, dpw = np.minimum(1.0, self.cap) * np.ones_like(u), np.zeros_like(u)
        else:
            raw = up**th
            pw = np.minimum(raw, self.cap)
            with np.errstate(divide="ignore", invalid="ignore"):
                dpw = np.where(pos & (raw < self.cap), th * up ** (th - 1), 0.0)
        b = self.w * (sing + self.hT * pw)
        db = self.w * (dsing + self.hT * dpw)
        return b, db

    def primitive(self, u: np.ndarray) -> np.ndarray:
        """Nodal primitives of the lumped right-hand side, zero at u = 0."""
        g, th, eps, cap = self.problem.gamma, self.problem.theta, self.eps, self.cap
        up = np.maximum(u, 0.0)
        neg = np.minimum(u, 0.0)
        if g == 1:
            Fs = self.fT * np.log((up + eps) / eps)
        else:
            Fs = self.fT * ((up + eps) ** (1 - g) - eps ** (1 - g)) / (1 - g)
        Fs = Fs + neg * self.fT * eps ** (-g)
        if th == 0:
            Fh = self.hT * min(1.0, cap) * u
        else:
            sc = cap ** (1 / th)
            Fh = np.where(
                up <= sc,
                up ** (th + 1) / (th + 1),
                sc ** (th + 1) / (th + 1) + cap * (up - sc),
            )
            Fh = self.hT * Fh
        return self.w * (Fs + Fh)

    def full(self, x: np.ndarray) -> np.ndarray:
        u = np.zeros(self.grid.n_vertices)
        u[self.grid.interior] = x
        return u

    def residual(self, x):
        u = self.full(x)
        I = self.grid.interior
        pb = self.problem
        A = energy_gradient(self.grid, pb.norm, pb.p, u)[I]
        b, _ = self.rhs(u)
        bI, wI = np.abs(b[I]), self.w[I]
        # floor: nodes where both the load and the flux vanish would otherwise have scale 0
        floor = wI * np.median(bI / wI)
        scale = energy_gradient_abs(self.grid, pb.norm, pb.p, u)[I] + bI + floor
        # roundoff allowance: evaluating G loses about eps * (|K||u|)_i to cancellation
        K = energy_hessian(self.grid, pb.norm, pb.p, u)[I][:, I]
        scale += ROUNDOFF_FACTOR * np.finfo(float).eps / self.tol * (abs(K) @ np.abs(x))
        return A - b[I], scale

    def jacobian(self, x):
        u = self.full(x)
        I = self.grid.interior
        pb = self.problem
        K = energy_hessian(self.grid, pb.norm, pb.p, u)[I][:, I]
        _, db = self.rhs(u)
        return K - sp.diags(db[I])

    def project(self, x, dx):
        # never move more than halfway to u = -eps/2, keeping (u^+ + eps) > eps/2
        return np.maximum(dx, -(x + 0.5 * self.eps) / 2.0)

    def objective(self, x):
        u = self.full(x)
        pb = self.problem
        I = self.grid.interior
        val = energy(self.grid, pb.norm, pb.p, u) - float(np.sum(self.primitive(u)[I]))
        G, _ = self.residual(x)
        return val, G


def _initial_guess(problem: ProblemSpec, grid: Grid, warm_start) -> np.ndarray:
    if warm_start is not None:
        u0 = np.asarray(getattr(warm_start, "values", warm_start), dtype=float)
        if u0.shape != (grid.n_vertices,):
            raise ValueError("warm start does not match the grid")
        if np.any(u0[grid.interior] <= 0):
            raise ValueError("warm start must be positive on interior nodes")
        return u0
    return grid.distance.copy()


def _report(problem: ProblemSpec, grid: Grid, eps: float, u: np.ndarray, iters: int, res: float, converged: bool):
    I = grid.interior
    nd = nehari_defect(problem, grid, u) if problem.gamma > 1 else None
    return SolveReport(
        u=DiscreteField(grid, u),
        epsilon=float(eps),
        newton_iters=int(iters),
        final_residual=float(res),
        energy_value=energy(grid, problem.norm, problem.p, u),
        seminorm=seminorm_p(grid, problem.norm, problem.p, u),
        min_u_interior=float(u[I].min()) if I.size else 0.0,
        nehari_defect=nd,
        converged=bool(converged),
    )


def solve_regularized(
    problem: ProblemSpec,
    grid: Grid,
    epsilon: float,
    warm_start=None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> SolveReport:
    """Damped Newton for the eps-regularised nodal system.

    Convergence means max_i |G_i| / scale_i <= tol with
    scale_i = |A|_i + |b_i| + w_i median_j(|b_j| / w_j) + (16 eps_mach / tol) (|K||u|)_i.
    |A|_i sums the absolute cell contributions at node i, K is the flux
    linearisation, and the last term admits the roundoff of evaluating G.  Returns the best iterate with
    ``converged=False`` when the iteration stalls.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if problem.f.is_zero():
        warnings.warn("f is identically zero; the singular term is absent", stacklevel=2)
        if problem.h.is_zero():
            # the zero field solves the system exactly
            return _report(problem, grid, epsilon, np.zeros(grid.n_vertices), 0, 0.0, True)
    reg = _Regularised(problem, grid, epsilon, tol)
    I = grid.interior
    u0 = _initial_guess(problem, grid, warm_start)
    res = damped_newton(reg.residual, reg.jacobian, u0[I], tol=tol, max_iter=max_iter, project=reg.project)
    u = reg.full(res.x)
    ok = res.converged and (problem.f.is_zero() or (I.size > 0 and u[I].min() > 0))
    if not ok:
        log.warning("regularised solve did not converge: eps=%g residual=%g", epsilon, res.residual)
    return _report(problem, grid, epsilon, u, res.iterations, res.residual, ok)


def solve_energy_descent(
    problem: ProblemSpec,
    grid: Grid,
    epsilon: float,
    initial=None,
    tol: float = 1e-10,
    max_iter: int = 5000,
) -> SolveReport:
    """Independent route to the discrete solution: minimise the discrete energy
    E(u) - sum_i w_i F_i(u_i) over interior values.

    A bound-constrained L-BFGS phase descends from the initial guess; a
    second-order descent phase on the same functional (Armijo test on the
    energy) then polishes the minimiser to the residual tolerance.
    """
    reg = _Regularised(problem, grid, epsilon, tol)
    I = grid.interior
    u0 = _initial_guess(problem, grid, initial)
    # unknowns scaled by sqrt of the lumped weights so the Hessian is O(1) on the diagonal
    sc = 1.0 / np.sqrt(np.maximum(reg.w[I], 1e-300))

    def fun(y):
        val, G = reg.objective(y * sc)
        return val, G * sc

    bounds = [(-0.5 * epsilon / s, None) for s in sc]
    out = minimize(fun, u0[I] / sc, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": max_iter, "maxcor": 30})
    y, nit = out.x, int(out.nit)
    y, k = _descent_polish(reg, fun, y, sc, tol)
    nit += k
    x = y * sc
    G, s = reg.residual(x)
    r = relative_residual(G, s)
    return _report(problem, grid, epsilon, reg.full(x), nit, r, r <= tol)


def _descent_polish(reg: _Regularised, fun, y, sc, tol, max_iter=100):
    """Newton directions with backtracking on the energy value.

    Once energy changes drop below roundoff the Armijo test is meaningless,
    so a step is then accepted if it reduces the gradient norm instead.
    """
    val, g = fun(y)
    for k in range(max_iter):
        G, s = reg.residual(y * sc)
        if relative_residual(G, s) <= tol:
            return y, k
        K = sp.diags(sc) @ reg.jacobian(y * sc) @ sp.diags(sc)
        d = np.abs(K.diagonal())
        K = sp.csc_matrix(K + sp.diags(1e-12 * np.where(d > 0, d, 1.0)))
        dy = spla.spsolve(K, -g)
        if not np.all(np.isfinite(dy)) or g @ dy >= 0:
            dy = -g
        dy = reg.project(y * sc, dy * sc) / sc
        t, moved = 1.0, False
        gn = np.linalg.norm(g)
        for _ in range(40):
            vt, gt = fun(y + t * dy)
            flat = abs(vt - val) <= 1e-13 * max(abs(val), 1.0)
            if vt <= val + 1e-4 * t * (g @ dy) and not flat:
                moved = True
            elif flat and np.linalg.norm(gt) < gn:
                moved = True
            if moved:
                break
            t *= 0.5
        if not moved:
            return y, k
        y, val, g = y + t * dy, vt, gt
    return y, max_iter


@dataclass
class ContinuationReport:
    schedule: list[float]
    reports: list[SolveReport]
    saturation_flag: bool
    growth_exponent: float
    completed: bool = True
    failure: str | None = None

    @property
    def seminorms(self) -> list[float]:
        return [r.seminorm for r in self.reports]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schedule": self.schedule,
            "seminorms": self.seminorms,
            "saturation_flag": self.saturation_flag,
            "growth_exponent": self.growth_exponent,
            "completed": self.completed,
            "failure": self.failure,
            "steps": [r.to_dict() for r in self.reports],
        }


def default_schedule(start: float = 1e-2, stop: float = 1e-10, ratio: float = 0.1) -> list[float]:
    n = int(round(math.log(stop / start) / math.log(ratio)))
    return [start * ratio**k for k in range(n + 1)]


def growth_exponent(schedule: Sequence[float], seminorms: Sequence[float], p: float) -> float:
    """Least-squares slope of log(seminorm^p) against log(1/eps) over the last half."""
    n = len(seminorms)
    if n < 3:
        return math.nan
    k0 = min(n // 2, n - 3)
    x = -np.log(np.asarray(schedule[k0:n], dtype=float))
    y = p * np.log(np.asarray(seminorms[k0:], dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def is_saturated(seminorms: Sequence[float], rel: float = 0.01) -> bool:
    s = np.asarray(seminorms, dtype=float)
    if s.size < 3:
        return False
    inc = np.abs(np.diff(s[-3:])) / s[-1]
    return bool(np.all(inc < rel))


def solve_continuation(
    problem: ProblemSpec,
    grid: Grid,
    schedule: Sequence[float] | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> ContinuationReport:
    """Warm-started sweep eps_0 > eps_1 > ... tracking the W^{1,p} seminorm."""
    schedule = list(default_schedule() if schedule is None else schedule)
    if not schedule:
        raise ValueError("empty schedule")
    if any(e <= 0 for e in schedule) or any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be positive and strictly decreasing")
    reports: list[SolveReport] = []
    warm = None
    failure = None
    for eps in schedule:
        rep = solve_regularized(problem, grid, eps, warm_start=warm, tol=tol, max_iter=max_iter)
        reports.append(rep)
        if not rep.converged:
            failure = f"solve failed at eps={eps:g} (residual {rep.final_residual:.3g})"
            break
        warm = rep.u
    sem = [r.seminorm for r in reports]
    done = failure is None
    return ContinuationReport(
        schedule=schedule[: len(reports)],
        reports=reports,
        saturation_flag=is_saturated(sem) if done else False,
        growth_exponent=growth_exponent(schedule[: len(reports)], sem, problem.p) if done else math.nan,
        completed=done,
        failure=failure,
    )


# -- variational objects for gamma > 1 ---------------------------------------


def _need_gamma_gt_1(problem: ProblemSpec) -> None:
    if not problem.gamma > 1:
        raise ValueError("defined only for gamma > 1")


def _zeroth_order_terms(problem: ProblemSpec, grid: Grid, u) -> tuple[float, float]:
    """Lumped sum_i w_i f_i u_i^{1-gamma} and sum_i w_i h_i u_i^{theta+1} over interior nodes."""
    u = np.asarray(getattr(u, "values", u), dtype=float)
    I = grid.interior
    w = lumped_mass(grid).weights[I]
    f = problem.f.nodal(grid)[I]
    h = problem.h.nodal(grid)[I]
    ui = np.abs(u[I])
    if np.any((f > 0) & (ui == 0)):
        return math.inf, float(np.sum(w * h * ui ** (problem.theta + 1)))
    with np.errstate(divide="ignore"):
        F = np.where(f > 0, f * ui ** (1 - problem.gamma), 0.0)
    return float(np.sum(w * F)), float(np.sum(w * h * ui ** (problem.theta + 1)))


def energy_J(problem: ProblemSpec, grid: Grid, u) -> float:
    """J(u) = (1/p) int H^p(grad u) + 1/(gamma-1) int f|u|^{1-gamma} - 1/(theta+1) int h|u|^{theta+1}.

    Returns +inf when u vanishes at an interior node where f > 0.
    """
    _need_gamma_gt_1(problem)
    Fs, Fh = _zeroth_order_terms(problem, grid, u)
    if math.isinf(Fs):
        return math.inf
    E = energy(grid, problem.norm, problem.p, np.asarray(getattr(u, "values", u)))
    return E + Fs / (problem.gamma - 1) - Fh / (problem.theta + 1)


def nehari_defect(problem: ProblemSpec, grid: Grid, u) -> float:
    """D(u) = int H^p(grad u) - int f|u|^{1-gamma} - int h|u|^{theta+1}; zero on the natural constraint."""
    _need_gamma_gt_1(problem)
    Fs, Fh = _zeroth_order_terms(problem, grid, u)
    E = energy(grid, problem.norm, problem.p, np.asarray(getattr(u, "values", u)))
    return problem.p * E - Fs - Fh


def compatibility_integral(problem: ProblemSpec, grid: Grid, u0, levels: int = 5, power: float = 1.0) -> StripIntegral:
    """int f |u0|^{1-gamma} with the boundary-strip divergence test.

    With ``power`` != 1 the datum is u0 = base^power for the nodal field
    ``base``; the power is applied after interpolation so that boundary
    behaviour like d^power survives inside the boundary cells.
    """
    base = np.asarray(getattr(u0, "values", u0), dtype=float)
    if np.any(base < 0):
        raise ValueError("u0 must be nonnegative")
    f = problem.f
    e = power * (1.0 - problem.gamma)
    if f.kind == "table":
        nodal = np.column_stack([base, np.asarray(f.values)])

        def integrand(v, d):
            return v[:, 1] * np.abs(v[:, 0]) ** e

    else:
        nodal = base

        def integrand(v, d):
            return f.at(None, d) * np.abs(v) ** e

    return strip_integral(grid, integrand, nodal, levels=levels)
