import math

import numpy as np
import pytest

from oracles import shooting_eigenvalue_1d
from singular_finsler.eigen import ConvergenceError, first_eigenpair, power_integral, rayleigh_quotient
from singular_finsler.finsler import FinslerSpec, make_rng
from singular_finsler.grid_fem import Domain, build_grid, lp_norm, lumped_mass

E1 = FinslerSpec.euclidean(1)
E2 = FinslerSpec.euclidean(2)


@pytest.fixture(scope="module")
def interval_p2():
    g = build_grid(Domain.interval(), 128)
    return first_eigenpair(g, E1, 2.0)


def test_interval_p2_close_to_pi_squared(interval_p2):
    assert interval_p2.lambda1 == pytest.approx(math.pi**2, rel=1e-3)
    x = interval_p2.grid.vertices[:, 0]
    s = np.sin(np.pi * x)
    phi = interval_p2.phi1.values
    assert np.max(np.abs(phi / np.max(phi) - s)) < 1e-3


def test_eigen_report_invariants(interval_p2):
    e = interval_p2
    g = e.grid
    phi = e.phi1.values
    assert np.all(phi >= 0) and phi[g.interior].min() > 0
    assert lp_norm(g, lumped_mass(g), e.p, phi) == pytest.approx(1.0, abs=1e-10)
    assert e.rayleigh_residual <= 10 * 1e-8
    assert e.to_dict()["lambda1"] == e.lambda1


def test_interval_p3_matches_shooting_oracle():
    g = build_grid(Domain.interval(), 256)
    e = first_eigenpair(g, E1, 3.0)
    assert e.lambda1 == pytest.approx(shooting_eigenvalue_1d(3.0), rel=1e-2)


def test_interval_p15_matches_shooting_oracle():
    g = build_grid(Domain.interval(), 256)
    e = first_eigenpair(g, E1, 1.5)
    assert e.lambda1 == pytest.approx(shooting_eigenvalue_1d(1.5), rel=1e-2)


def test_square_p2_coarse():
    g = build_grid(Domain.rectangle(), 32)
    e = first_eigenpair(g, E2, 2.0)
    assert e.lambda1 == pytest.approx(2 * math.pi**2, rel=1e-2)


def test_ellipse_scales_eigenvalue():
    # H = sqrt(a) |xi| in 1D: lambda scales by a^{p/2}
    g = build_grid(Domain.interval(), 64)
    base = first_eigenpair(g, E1, 3.0).lambda1
    scaled = first_eigenpair(g, FinslerSpec.ellipse([[4.0]]), 3.0).lambda1
    assert scaled == pytest.approx(8.0 * base, rel=1e-7)


def test_lumped_eigenvalues_converge_monotonically_from_below():
    lams = [first_eigenpair(build_grid(Domain.interval(), n), E1, 2.0).lambda1 for n in (16, 32, 64, 128)]
    assert np.all(np.diff(lams) > 0) and lams[-1] < math.pi**2
    lams = [first_eigenpair(build_grid(Domain.rectangle(), n), E2, 2.0).lambda1 for n in (8, 16, 32)]
    assert np.all(np.diff(lams) > 0) and lams[-1] < 2 * math.pi**2


def test_rayleigh_minimality(interval_p2):
    e = interval_p2
    g = e.grid
    phi = e.phi1.values
    rng = make_rng(0)
    for _ in range(100):
        v = rng.standard_normal(g.n_vertices)
        v[g.boundary_mask] = 0
        pert = phi + 1e-2 * np.max(phi) * v / np.max(np.abs(v))
        assert rayleigh_quotient(g, E1, 2.0, pert) >= e.lambda1 - 1e-8 * e.lambda1


def test_rayleigh_quotient_examples(interval_p2):
    e = interval_p2
    g = e.grid
    for t in (1e-3, 0.5, 7.0):
        assert rayleigh_quotient(g, E1, 2.0, t * e.phi1.values) == pytest.approx(e.lambda1, rel=1e-12)
    x = g.vertices[:, 0]
    # continuous value 10; lumped quadrature of u^2 is second-order accurate
    assert rayleigh_quotient(g, E1, 2.0, x * (1 - x)) == pytest.approx(10.0, rel=1e-3)
    with pytest.raises(ValueError):
        rayleigh_quotient(g, E1, 2.0, np.zeros(g.n_vertices))


def test_first_eigenpair_errors():
    with pytest.raises(ValueError):
        first_eigenpair(build_grid(Domain.interval(), 2), E1, 2.0)
    g = build_grid(Domain.interval(), 16)
    with pytest.raises(ValueError):
        first_eigenpair(g, E1, 1.0)
    with pytest.raises(ValueError):
        first_eigenpair(g, E1, 2.0, tol=0)
    with pytest.raises(ConvergenceError):
        first_eigenpair(g, E1, 2.0, tol=1e-14, max_iter=1)


def test_power_integral_examples(interval_p2):
    e = interval_p2
    g = e.grid
    r0 = power_integral(g, lumped_mass(g), e.phi1, 0.0)
    assert r0.analytic_finite and r0.consistent and r0.value == pytest.approx(1.0, rel=1e-10)
    rh = power_integral(g, None, e.phi1, -0.5)
    assert rh.analytic_finite and rh.numeric.finite and rh.consistent
    assert rh.numeric.decay_exponent == pytest.approx(0.5, abs=0.05)
    rd = power_integral(g, None, e.phi1, -1.5)
    assert not rd.analytic_finite and not rd.numeric.finite and rd.consistent
    assert math.isinf(rd.value)
    assert rd.numeric.estimates[-1] > rd.numeric.estimates[0]


def test_power_integral_two_dimensional():
    g = build_grid(Domain.rectangle(), 24)
    e = first_eigenpair(g, E2, 2.0)
    assert power_integral(g, None, e.phi1, -0.5).consistent
    assert power_integral(g, None, e.phi1, -1.5).consistent
