"""Finite-element experiments for singular anisotropic p-Laplacian problems."""

from .eigen import EigenReport, first_eigenpair, power_integral, rayleigh_quotient
from .experiments import (
    barrier_check,
    barrier_exponent,
    comparison_check,
    compute_barrier_constants,
    gamma_sweep,
    predict_existence,
    summability_sweep,
)
from .finsler import FinslerSpec, check_assumptions, verify_vector_inequalities
from .grid_fem import DiscreteField, Domain, Grid, build_grid
from .singular import (
    DataSpec,
    ProblemSpec,
    compatibility_integral,
    energy_J,
    nehari_defect,
    solve_continuation,
    solve_energy_descent,
    solve_regularized,
)

__all__ = [
    "DataSpec",
    "DiscreteField",
    "Domain",
    "EigenReport",
    "FinslerSpec",
    "Grid",
    "ProblemSpec",
    "barrier_check",
    "barrier_exponent",
    "build_grid",
    "check_assumptions",
    "comparison_check",
    "compatibility_integral",
    "compute_barrier_constants",
    "energy_J",
    "first_eigenpair",
    "gamma_sweep",
    "nehari_defect",
    "power_integral",
    "predict_existence",
    "rayleigh_quotient",
    "solve_continuation",
    "solve_energy_descent",
    "solve_regularized",
    "summability_sweep",
    "verify_vector_inequalities",
]
