"""First Dirichlet eigenpair of the anisotropic p-Laplacian by inverse power iteration."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .finsler import FinslerSpec
from .grid_fem import (
    DiscreteField,
    Grid,
    QuadratureRule,
    StripIntegral,
    energy,
    energy_gradient,
    energy_gradient_abs,
    energy_hessian,
    lp_norm,
    lumped_mass,
    strip_integral,
)
from .newton import damped_newton


class ConvergenceError(RuntimeError):
    pass


@dataclass
class EigenReport:
    lambda1: float
    phi1: DiscreteField
    rayleigh_residual: float
    iterations: int
    p: float
    norm: FinslerSpec

    @property
    def grid(self) -> Grid:
        return self.phi1.grid

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "rayleigh_residual": self.rayleigh_residual,
            "iterations": self.iterations,
            "p": self.p,
            "norm": self.norm.to_dict(),
        }


def rayleigh_quotient(grid: Grid, norm: FinslerSpec, p: float, u) -> float:
    u = np.asarray(getattr(u, "values", u), dtype=float)
    den = lp_norm(grid, lumped_mass(grid), p, u) ** p
    if den == 0:
        raise ValueError("Rayleigh quotient of the zero field")
    return p * energy(grid, norm, p, u) / den


def _eigen_residual(grid, norm, p, w, lam, u) -> float:
    I = grid.interior
    rhs = lam * w * np.sign(u) * np.abs(u) ** (p - 1)
    r = energy_gradient(grid, norm, p, u) - rhs
    return float(np.max(np.abs(r[I])) / np.max(np.abs(rhs[I])))


def first_eigenpair(
    grid: Grid,
    norm: FinslerSpec,
    p: float,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> EigenReport:
    """Inverse power iteration: given u_k solve A(v) = lambda_k w|u_k|^{p-2}u_k,
    then renormalise to ||v||_{L^p} = 1 (lumped).

    Stops when the eigenvalue increment is below ``tol`` relative and the
    nodal eigen-residual is below ``10 tol`` relative.
    """
    if not p > 1:
        raise ValueError("p must be > 1")
    if not tol > 0:
        raise ValueError("tol must be positive")
    I = grid.interior
    if I.size < 2:
        raise ValueError("grid too coarse: fewer than two interior nodes")
    w = lumped_mass(grid).weights
    quad = QuadratureRule(w)

    def normalise(v):
        return v / lp_norm(grid, quad, p, v)

    u = normalise(grid.distance.copy())
    lam = rayleigh_quotient(grid, norm, p, u)
    for k in range(1, max_iter + 1):
        target = lam * w * np.sign(u) * np.abs(u) ** (p - 1)

        def residual(x, target=target):
            v = np.zeros(grid.n_vertices)
            v[I] = x
            A = energy_gradient(grid, norm, p, v)[I]
            return A - target[I], energy_gradient_abs(grid, norm, p, v)[I] + np.abs(target[I])

        def jacobian(x):
            v = np.zeros(grid.n_vertices)
            v[I] = x
            return energy_hessian(grid, norm, p, v)[I][:, I]

        res = damped_newton(residual, jacobian, u[I], tol=min(1e-12, tol * 1e-3), max_iter=100)
        v = np.zeros(grid.n_vertices)
        v[I] = res.x
        u = normalise(v)
        lam_new = rayleigh_quotient(grid, norm, p, u)
        rr = _eigen_residual(grid, norm, p, w, lam_new, u)
        done = abs(lam_new - lam) <= tol * lam_new and rr <= 10 * tol
        lam = lam_new
        if done:
            return EigenReport(lam, DiscreteField(grid, u), rr, k, float(p), norm)
    raise ConvergenceError(f"inverse iteration did not converge in {max_iter} iterations")


@dataclass
class PowerIntegralReport:
    r: float
    analytic_finite: bool
    numeric: StripIntegral
    consistent: bool

    @property
    def value(self) -> float:
        return self.numeric.value if self.analytic_finite else math.inf

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "analytic_finite": self.analytic_finite,
            "consistent": self.consistent,
            "value": self.value,
            "numeric": self.numeric.to_dict(),
        }


def power_integral(grid: Grid, quad: QuadratureRule | None, phi1, r: float, levels: int = 5) -> PowerIntegralReport:
    """int phi1^r: finite iff r > -1 (linear decay of phi1 at the boundary),
    backed by the boundary-strip refinement sequence of the discrete field."""
    phi = np.asarray(getattr(phi1, "values", phi1), dtype=float)
    analytic = r > -1
    num = strip_integral(grid, lambda v, d: np.abs(v) ** r, phi, levels=levels)
    return PowerIntegralReport(float(r), analytic, num, num.finite == analytic)
