"""Executable checks of the qualitative theory: existence thresholds, eigenfunction
barriers, comparison, and parameter sweeps of the eps-continuation."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .eigen import EigenReport
from .finsler import FinslerSpec
from .grid_fem import Grid
from .singular import (
    DataSpec,
    ProblemSpec,
    compatibility_integral,
    solve_continuation,
    solve_regularized,
)

BOUNDED_MAX = 0.05
BLOWUP_MIN = 0.2
INCONCLUSIVE_HALF_WIDTH = 0.25


class HypothesisError(ValueError):
    """Inputs outside the range where the underlying result applies."""


# -- thresholds -------------------------------------------------------------


@dataclass(frozen=True)
class ExistencePrediction:
    exists: bool
    threshold: float


def existence_threshold(p: float, m: float = math.inf) -> float:
    """2 + 1/(p-1) - p/((p-1) m); the last term vanishes for m = inf."""
    base = 2.0 + 1.0 / (p - 1.0)
    if math.isinf(m):
        return base
    return base - p / ((p - 1.0) * m)


def predict_existence(p: float, gamma: float, m: float = math.inf) -> ExistencePrediction:
    """Finite-energy solution expected iff gamma < threshold (strict)."""
    if not p > 1:
        raise ValueError("p must be > 1")
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    if not m > 1:
        raise ValueError("m must be > 1")
    if not math.isinf(m) and gamma <= 1:
        raise HypothesisError("the L^m refinement requires gamma > 1")
    thr = existence_threshold(p, m)
    return ExistencePrediction(bool(gamma < thr), thr)


@dataclass(frozen=True)
class BarrierExponent:
    """Exponents of the eigenfunction barriers s1 phi^lower <= u <= s2 phi^upper."""

    regime: str  # "gamma_gt_1" or "gamma_le_1"
    eta: float  # lower-barrier exponent
    t_interval: tuple[float, float] | None = None

    def upper(self, t: float | None = None) -> float:
        if self.regime == "gamma_gt_1":
            return self.eta
        lo, hi = self.t_interval
        t = 0.5 * (lo + hi) if t is None else t
        if not lo < t < hi:
            raise ValueError(f"t must lie in ({lo}, {hi})")
        return t


def barrier_exponent(p: float, gamma: float) -> BarrierExponent:
    if not p > 1:
        raise ValueError("p must be > 1")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if gamma >= existence_threshold(p):
        raise HypothesisError("barrier not in the energy space for gamma >= 2 + 1/(p-1)")
    if gamma > 1:
        return BarrierExponent("gamma_gt_1", p / (gamma + p - 1))
    return BarrierExponent("gamma_le_1", 1.0, ((p - 1) / p, 1.0))


# -- barrier constants ------------------------------------------------------


def _g_bounds(problem: ProblemSpec, grid: Grid, u) -> tuple[float, float]:
    """m = min g, M = max g over interior nodes, g = f + h u^{gamma+theta}."""
    for name, d in (("f", problem.f), ("h", problem.h)):
        if d.kind == "dist_power" and d.sigma > 0:
            raise HypothesisError(f"{name} must be bounded for the barrier estimate")
    I = grid.interior
    f = problem.f.nodal(grid)[I]
    h = problem.h.nodal(grid)[I]
    if np.any(h > 0):
        if u is None:
            raise ValueError("h > 0 needs the solution u to bound g")
        uv = np.asarray(getattr(u, "values", u), dtype=float)[I]
        g = f + h * np.abs(uv) ** (problem.gamma + problem.theta)
    else:
        g = f
    m = float(g.min())
    if not m > 0:
        raise HypothesisError("f must be bounded below by a positive constant")
    return m, float(g.max())


def compute_barrier_constants(
    eigen: EigenReport,
    problem: ProblemSpec,
    grid: Grid,
    strip_eps: float,
    u=None,
    t: float | None = None,
    corner_radius: float | None = None,
) -> tuple[float, float]:
    """Constants (s1, s2) of the eigenfunction barriers.

    For gamma > 1 the supersolution constant is the larger of a boundary-strip
    value, using the minimal cell gradient of phi1 in {d < strip_eps}, and an
    interior value using the minimum of phi1 on {d >= strip_eps}.  For
    gamma <= 1 both constants come from pointwise bounds of the barrier kernel
    (upper exponent ``t``, default the midpoint of the admissible interval).

    On rectangles, cells within ``corner_radius`` (default 4h) of a corner are
    left out of the strip minimum, matching the region tested by
    :func:`barrier_check`.
    """
    p, gamma, norm = problem.p, problem.gamma, problem.norm
    if not strip_eps > 2 * _boundary_h(grid):
        raise ValueError("strip_eps must exceed twice the boundary cell size")
    be = barrier_exponent(p, gamma)
    m, M = _g_bounds(problem, grid, u)
    lam = eigen.lambda1
    phi = np.abs(eigen.phi1.values)
    grads = grid.cell_gradients(phi)
    Hp = norm.value(grads) ** p
    cphi = phi[grid.cells]
    cdist = grid.distance[grid.cells]
    k = gamma + p - 1
    if be.regime == "gamma_gt_1":
        eta = be.eta
        strip = np.min(cdist, axis=1) < strip_eps
        if grid.dim > 1:
            crad = 4 * grid.h if corner_radius is None else corner_radius
            cent = grid.vertices[grid.cells].mean(axis=1)
            corners = grid.domain.corners()
            dc = np.min(np.linalg.norm(cent[:, None, :] - corners[None], axis=-1), axis=1)
            strip &= dc > crad
        if not strip.any():
            raise ValueError("strip contains no cells")
        alpha, _ = norm.bounds()
        gmin = float(np.min(np.linalg.norm(grads[strip], axis=-1)))
        if gmin == 0:
            raise ValueError("phi1 has a vanishing gradient in the boundary strip")
        s2_strip = (M / (eta ** (p - 1) * (1 - eta) * alpha**p * gmin**p)) ** (1 / k)
        inner = (grid.distance >= strip_eps) & ~grid.boundary_mask
        s2_inner = 0.0
        if inner.any():
            s2_inner = (M / (eta ** (p - 1) * lam * float(phi[inner].min()) ** p)) ** (1 / k)
        s2 = max(s2_strip, s2_inner)
        kern = eta ** (p - 1) * ((1 - eta) * (p - 1) * Hp + lam * cphi.max(axis=1) ** p)
        s1 = (m / float(kern.max())) ** (1 / k)
        return float(s1), float(s2)
    tt = be.upper(t)
    e1 = tt * (p - 1) - p + tt * gamma  # < 0
    e2 = tt * (p - 1) + tt * gamma
    # lower bound of the kernel on each cell: phi^e1 at the largest phi, phi^e2 at the smallest
    kern = tt ** (p - 1) * ((1 - tt) * (p - 1) * cphi.max(axis=1) ** e1 * Hp + lam * cphi.min(axis=1) ** e2)
    s2 = (M / float(kern.min())) ** (1 / k)
    s1 = (m / (lam * float(phi.max()) ** (p - 1 + gamma))) ** (1 / k)
    return float(s1), float(s2)


def _boundary_h(grid: Grid) -> float:
    bcell = np.any(grid.boundary_mask[grid.cells], axis=1)
    return float(np.max(grid.cell_measure[bcell] ** (1.0 / grid.dim)))


@dataclass
class BarrierReport:
    eta: float
    upper_eta: float
    s1: float
    s2: float
    lower_violation_fraction: float
    upper_violation_fraction: float
    excluded_nodes: int
    checked_nodes: int
    slack: float
    consistent: bool

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def barrier_check(
    u,
    eigen: EigenReport,
    s1: float,
    s2: float,
    eta: float,
    slack: float | None = None,
    exclusion_radius: float | None = None,
    corner_radius: float | None = None,
    upper_eta: float | None = None,
) -> BarrierReport:
    """Count nodes violating s1 phi^eta - slack <= u <= s2 phi^upper_eta + slack.

    Defaults: slack 5 h max|u|, a boundary strip of width 2h and balls of
    radius 4h around the domain corners are excluded.
    """
    grid = eigen.grid
    uv = np.asarray(getattr(u, "values", u), dtype=float)
    phi = np.abs(eigen.phi1.values)
    h = grid.h
    slack = 5 * h * float(np.max(np.abs(uv))) if slack is None else slack
    excl = 2 * h if exclusion_radius is None else exclusion_radius
    crad = 4 * h if corner_radius is None else corner_radius
    upper_eta = eta if upper_eta is None else upper_eta
    keep = grid.distance > excl
    if grid.dim > 1:
        corners = grid.domain.corners()
        dc = np.min(np.linalg.norm(grid.vertices[:, None, :] - corners[None], axis=-1), axis=1)
        keep &= dc > crad
    n = int(keep.sum())
    lower = s1 * phi[keep] ** eta - slack > uv[keep]
    upper = uv[keep] > s2 * phi[keep] ** upper_eta + slack
    frac = (lambda v: float(v.sum()) / n) if n else (lambda v: 0.0)
    return BarrierReport(
        eta=float(eta),
        upper_eta=float(upper_eta),
        s1=float(s1),
        s2=float(s2),
        lower_violation_fraction=frac(lower),
        upper_violation_fraction=frac(upper),
        excluded_nodes=int(grid.n_vertices - n),
        checked_nodes=n,
        slack=float(slack),
        consistent=bool(s1 <= s2),
    )


# -- comparison -------------------------------------------------------------


@dataclass
class ComparisonReport:
    max_violation: float
    passed: bool
    tolerance: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def comparison_check(
    problem1: ProblemSpec,
    problem2: ProblemSpec,
    grid: Grid,
    eps: float,
    tol: float = 1e-8,
) -> ComparisonReport:
    """Solve both problems and report max (u1 - u2)^+ over the nodes."""
    if problem1.p != problem2.p or problem1.norm.to_dict() != problem2.norm.to_dict():
        raise HypothesisError("problems must share p and the norm")
    if problem1.gamma != problem2.gamma or problem1.theta != problem2.theta:
        raise HypothesisError("problems must share gamma and theta")
    if np.any(problem1.f.nodal(grid) > problem2.f.nodal(grid)):
        raise HypothesisError("comparison needs f1 <= f2")
    if np.any(problem1.h.nodal(grid) > problem2.h.nodal(grid)):
        raise HypothesisError("comparison needs h1 <= h2")
    r1 = solve_regularized(problem1, grid, eps)
    r2 = solve_regularized(problem2, grid, eps)
    if not (r1.converged and r2.converged):
        raise RuntimeError("a comparison solve did not converge")
    v = float(np.max(np.maximum(r1.u.values - r2.u.values, 0.0)))
    return ComparisonReport(v, v <= tol, tol)


# -- sweeps -----------------------------------------------------------------


def classify(growth: float) -> str:
    if not math.isfinite(growth):
        return "failed"
    if growth <= BOUNDED_MAX:
        return "bounded"
    if growth >= BLOWUP_MIN:
        return "blow-up"
    return "inconclusive"


@dataclass
class SweepEntry:
    value: float
    growth_exponent: float
    saturated: bool
    classification: str
    predicted_exists: bool
    threshold: float
    in_band: bool
    completed: bool = True
    failure: str | None = None
    seminorms: list[float] = field(default_factory=list)
    compatibility_finite: bool | None = None
    compatibility_expected: bool | None = None
    existence_only: bool = False

    @property
    def agrees(self) -> bool:
        """Classification consistent with the prediction (always true inside the band).

        With ``existence_only`` a predicted non-existence makes no claim, since
        the datum used is not a non-existence witness.
        """
        if self.in_band or (self.existence_only and not self.predicted_exists):
            return True
        return self.classification == ("bounded" if self.predicted_exists else "blow-up")


@dataclass
class SweepReport:
    parameter: str
    values: list[float]
    entries: list[SweepEntry]
    predicted_threshold: float | list[float]

    @property
    def consistent(self) -> bool:
        return all(e.agrees for e in self.entries)

    def to_dict(self) -> dict[str, Any]:
        return {
            "parameter": self.parameter,
            "values": self.values,
            "predicted_threshold": self.predicted_threshold,
            "consistent": self.consistent,
            "entries": [dict(asdict(e), agrees=e.agrees) for e in self.entries],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["value", "growth_exponent", "saturated", "predicted_exists"])
            for e in self.entries:
                w.writerow([repr(e.value), repr(e.growth_exponent), int(e.saturated), int(e.predicted_exists)])


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _entry(problem: ProblemSpec, grid: Grid, schedule, value: float, pred: ExistencePrediction, band_center: float):
    c = solve_continuation(problem, grid, schedule)
    return SweepEntry(
        value=float(value),
        growth_exponent=c.growth_exponent,
        saturated=c.saturation_flag,
        classification=classify(c.growth_exponent) if c.completed else "failed",
        predicted_exists=pred.exists,
        threshold=pred.threshold,
        in_band=abs(problem.gamma - band_center) < INCONCLUSIVE_HALF_WIDTH,
        completed=c.completed,
        failure=c.failure,
        seminorms=c.seminorms,
    )


def gamma_sweep(
    template: ProblemSpec,
    grid: Grid,
    gamma_values: Sequence[float],
    schedule: Sequence[float],
    threads: int = 1,
) -> SweepReport:
    """Continuation per gamma, classified by the seminorm growth exponent."""
    if template.f.min_value() <= 0 or (template.f.kind == "dist_power" and template.f.sigma > 0):
        raise HypothesisError("gamma sweep needs f bounded and bounded below by c > 0")
    values = sorted(float(g) for g in gamma_values)
    thr = existence_threshold(template.p)

    def run(g):
        return _entry(template.with_(gamma=g), grid, schedule, g, predict_existence(template.p, g), thr)

    return SweepReport("gamma", values, _map(run, values, threads), thr)


def witness_sigma(m: float, delta_m: float = 0.05) -> float:
    """Exponent of the witness datum d^{-sigma}, just inside L^m."""
    return (1.0 - delta_m) / m


def optimal_t(p: float, offset: float = 1e-3) -> float:
    """Exponent just above (p-1)/p for the initial datum phi1^t."""
    return (p - 1) / p + offset


def summability_sweep(
    p: float,
    gamma: float,
    m_values: Sequence[float],
    grid: Grid,
    schedule: Sequence[float],
    eigen: EigenReport,
    delta_m: float = 0.05,
    norm: FinslerSpec | None = None,
    threads: int = 1,
    levels: int = 5,
) -> SweepReport:
    """Per m: witness f = d^{-sigma(m)}, compatibility of phi1^t, and the continuation."""
    if not gamma > 1:
        raise HypothesisError("summability sweep requires gamma > 1")
    if not 0 < delta_m < 1:
        raise ValueError("delta_m must lie in (0, 1)")
    values = sorted(float(m) for m in m_values)
    norm = FinslerSpec.euclidean(grid.dim) if norm is None else norm
    t = optimal_t(p)
    phi = np.abs(eigen.phi1.values)

    def run(m):
        sigma = witness_sigma(m, delta_m)
        if sigma * m >= 1:
            raise HypothesisError("f = d^{-sigma} is not in L^m")
        pb = ProblemSpec(p=p, gamma=gamma, norm=norm, f=DataSpec.dist_power(sigma),
                         domain=grid.domain, resolution=grid.resolution)
        pred = predict_existence(p, gamma, m)
        e = _entry(pb, grid, schedule, m, pred, pred.threshold)
        comp = compatibility_integral(pb, grid, phi, levels=levels, power=t)
        e.existence_only = True
        e.compatibility_finite = comp.finite
        e.compatibility_expected = bool(sigma + t * (gamma - 1) < 1)
        return e

    entries = _map(run, values, threads)
    return SweepReport("m", values, entries, [e.threshold for e in entries])
