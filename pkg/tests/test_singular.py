import json
import math
import warnings

import numpy as np
import pytest

from oracles import layer_growth_exponent
from singular_finsler.eigen import first_eigenpair
from singular_finsler.finsler import FinslerSpec
from singular_finsler.grid_fem import Domain, build_grid, seminorm_p
from singular_finsler.singular import (
    DataSpec,
    ProblemSpec,
    compatibility_integral,
    default_schedule,
    energy_J,
    growth_exponent,
    nehari_defect,
    solve_continuation,
    solve_energy_descent,
    solve_regularized,
)

TILT = FinslerSpec.ellipse([[3.0, 1.0], [1.0, 2.0]])

UNIQUENESS_CASES = {
    "p2_g05": ProblemSpec(p=2, gamma=0.5, resolution=128),
    "p2_g2": ProblemSpec(p=2, gamma=2, resolution=128),
    "p15_g15": ProblemSpec(p=1.5, gamma=1.5, resolution=96),
    "p3_g2_h": ProblemSpec(p=3, gamma=2, theta=0.5, h=DataSpec.constant(1.0), resolution=96),
    "2d_tilted": ProblemSpec(p=2, gamma=1.5, norm=TILT, domain=Domain.rectangle(), resolution=(16, 16)),
}


def _manufactured(name, p, gamma, n):
    g = build_grid(Domain.interval(), n)
    x = g.vertices[:, 0]
    if name == "sine":
        u = np.sin(np.pi * x)
        f = np.pi**2 * np.abs(u) ** (1 + gamma)
    else:
        u = x * (1 - x)
        f = 2 * (p - 1) * np.abs(1 - 2 * x) ** (p - 2) * np.abs(u) ** gamma
    pb = ProblemSpec(p=p, gamma=gamma, f=DataSpec.table(f), resolution=n)
    return pb, g, u


# -- specs -------------------------------------------------------------------


def test_problem_spec_json_round_trip():
    pb = ProblemSpec(p=3, gamma=1.5, theta=0.5, norm=TILT, f=DataSpec.dist_power(0.2, 2.0),
                     h=DataSpec.constant(0.5), domain=Domain.rectangle(1.0, 2.0), resolution=(8, 4))
    again = ProblemSpec.from_dict(json.loads(json.dumps(pb.to_dict())))
    assert again.to_dict() == pb.to_dict()
    minimal = ProblemSpec.from_dict({"p": 2, "gamma": 1})
    assert minimal.norm.dim == 1 and minimal.f.value == 1.0 and minimal.h.is_zero()


@pytest.mark.parametrize(
    "kw",
    [dict(p=1.0, gamma=1), dict(p=2, gamma=0), dict(p=2, gamma=1, theta=1.0), dict(p=2, gamma=1, theta=-0.1),
     dict(p=2, gamma=1, f=DataSpec.constant(-1.0)), dict(p=2, gamma=1, norm=TILT)],
)
def test_problem_spec_validation(kw):
    with pytest.raises(ValueError):
        ProblemSpec(**kw)


def test_data_spec_nodal_values():
    g = build_grid(Domain.interval(), 4)
    np.testing.assert_allclose(DataSpec.dist_power(1.0).nodal(g)[1:-1], [4, 2, 4])
    assert math.isinf(DataSpec.dist_power(1.0).nodal(g)[0])
    with pytest.raises(ValueError):
        DataSpec.table([1.0, 2.0]).nodal(g)
    with pytest.raises(ValueError):
        DataSpec("nonsense")


# -- regularised solves ----------------------------------------------------


def test_zero_data_gives_zero_with_warning():
    pb = ProblemSpec(p=2, gamma=1, f=DataSpec.constant(0.0), resolution=16)
    with pytest.warns(UserWarning):
        r = solve_regularized(pb, pb.grid(), 1e-6)
    assert np.all(r.u.values == 0) and r.converged


def test_solve_rejects_bad_inputs():
    pb = ProblemSpec(p=2, gamma=1, resolution=16)
    g = pb.grid()
    with pytest.raises(ValueError):
        solve_regularized(pb, g, 0.0)
    with pytest.raises(ValueError):
        solve_regularized(pb, g, 1e-6, warm_start=-g.distance - 1)


@pytest.mark.parametrize("name", list(UNIQUENESS_CASES))
def test_solve_report_invariants(name):
    pb = UNIQUENESS_CASES[name]
    r = solve_regularized(pb, pb.grid(), 1e-8)
    assert r.converged and r.final_residual <= 1e-10 and r.min_u_interior > 0
    vals = [r.epsilon, r.final_residual, r.energy_value, r.seminorm, r.min_u_interior]
    assert all(np.isfinite(vals))
    assert (r.nehari_defect is None) == (pb.gamma <= 1)
    assert np.all(r.u.values[pb.grid().boundary_mask] == 0)


@pytest.mark.parametrize("name", list(UNIQUENESS_CASES))
def test_three_solver_paths_agree(name):
    pb = UNIQUENESS_CASES[name]
    g = pb.grid()
    a = solve_regularized(pb, g, 1e-8)
    b = solve_regularized(pb, g, 1e-8, warm_start=10 * g.distance)
    c = solve_energy_descent(pb, g, 1e-8)
    assert a.converged and b.converged and c.converged
    scale = np.max(np.abs(a.u.values))
    for other in (b, c):
        assert np.max(np.abs(other.u.values - a.u.values)) <= 1e-8 * scale


def test_solve_is_deterministic():
    pb = UNIQUENESS_CASES["p3_g2_h"]
    g = pb.grid()
    a = solve_regularized(pb, g, 1e-8)
    b = solve_regularized(pb, g, 1e-8)
    np.testing.assert_array_equal(a.u.values, b.u.values)
    assert a.final_residual == b.final_residual


@pytest.mark.parametrize("name,p,gamma", [("sine", 2.0, 1.0), ("parabola", 4.0, 2.0)])
def test_manufactured_solutions_observed_order(name, p, gamma):
    errs = []
    for n in (32, 64, 128, 256):
        pb, g, exact = _manufactured(name, p, gamma, n)
        r = solve_regularized(pb, g, 1e-8)
        assert r.converged
        errs.append(np.max(np.abs(r.u.values - exact)))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    # nodal values of lumped P1 converge at second order on these profiles
    assert np.all(np.abs(ratios - 4.0) < 0.8)
    assert errs[-1] < 1e-4


def test_tabulated_f_with_zero_values_converges():
    pb, g, _ = _manufactured("parabola", 4.0, 2.0, 32)
    assert solve_regularized(pb, g, 1e-8).converged


# -- continuation ----------------------------------------------------------


def test_continuation_subcritical_saturates():
    pb = ProblemSpec(p=2, gamma=0.5, resolution=256)
    c = solve_continuation(pb, pb.grid(), default_schedule(1e-2, 1e-8))
    assert c.completed and c.saturation_flag and abs(c.growth_exponent) <= 0.05
    assert np.all(np.diff(c.seminorms) >= -1e-10)


def test_continuation_limit_is_mesh_stable():
    vals = []
    for n in (128, 256, 512):
        pb = ProblemSpec(p=2, gamma=0.5, resolution=n)
        vals.append(solve_continuation(pb, pb.grid(), default_schedule(1e-2, 1e-8)).seminorms[-1])
    assert abs(vals[2] - vals[1]) < abs(vals[1] - vals[0]) and abs(vals[2] - vals[1]) / vals[2] < 1e-3


@pytest.fixture(scope="module")
def graded():
    return build_grid(Domain.interval(), 2048, min_cell=1e-27)


@pytest.mark.parametrize("gamma", [3.5, 4.0])
def test_continuation_supercritical_growth_matches_layer_asymptotics(graded, gamma):
    pb = ProblemSpec(p=2, gamma=gamma)
    c = solve_continuation(pb, graded, default_schedule())
    assert c.completed and not c.saturation_flag
    assert c.growth_exponent >= 0.2
    assert c.growth_exponent == pytest.approx(layer_growth_exponent(2, gamma), abs=0.02)
    assert np.all(np.diff(c.seminorms) >= -1e-10)


def test_gradient_convergence_diagnostic():
    pb = ProblemSpec(p=2, gamma=0.5, resolution=256)
    g = pb.grid()
    c = solve_continuation(pb, g, default_schedule(1e-2, 1e-8))
    last = c.reports[-1].u.values
    gaps = [seminorm_p(g, pb.norm, 2, r.u.values - last) for r in c.reports[:-1]]
    assert np.all(np.diff(gaps) < 0)
    assert gaps[-1] < 1e-3 * seminorm_p(g, pb.norm, 2, last)


def test_continuation_schedule_validation():
    pb = ProblemSpec(p=2, gamma=1, resolution=16)
    g = pb.grid()
    for bad in ([], [1e-2, 1e-2], [1e-3, 1e-2], [1e-2, -1e-3]):
        with pytest.raises(ValueError):
            solve_continuation(pb, g, bad)


def test_continuation_failure_returns_partial_report():
    pb = ProblemSpec(p=2, gamma=2, resolution=64)
    c = solve_continuation(pb, pb.grid(), [1e-2, 1e-3, 1e-4], max_iter=1)
    assert not c.completed and c.failure and len(c.reports) == 1
    assert math.isnan(c.growth_exponent)


def test_growth_exponent_fit():
    eps = default_schedule()
    sem = [e**-0.25 for e in eps]
    assert growth_exponent(eps, sem, 2.0) == pytest.approx(0.5, rel=1e-12)
    assert math.isnan(growth_exponent(eps[:2], sem[:2], 2.0))


# -- variational structure --------------------------------------------------


@pytest.fixture(scope="module")
def solved_gamma2():
    pb = ProblemSpec(p=2, gamma=2, resolution=256)
    g = pb.grid()
    return pb, g, solve_regularized(pb, g, 1e-8).u.values


def test_energy_J_examples(solved_gamma2):
    pb, g, u = solved_gamma2
    assert energy_J(pb, g, u) > 0
    assert energy_J(pb, g, 0.01 * u) > energy_J(pb, g, 0.1 * u) > energy_J(pb, g, u)
    ts = np.linspace(0.5, 2.0, 41)
    t_best = ts[np.argmin([energy_J(pb, g, t * u) for t in ts])]
    assert abs(t_best - 1.0) <= ts[1] - ts[0]
    v = u.copy()
    v[g.interior[3]] = 0.0
    assert math.isinf(energy_J(pb, g, v))


def test_variational_objects_need_gamma_above_one():
    pb = ProblemSpec(p=2, gamma=1.0, resolution=16)
    g = pb.grid()
    with pytest.raises(ValueError):
        energy_J(pb, g, g.distance)
    with pytest.raises(ValueError):
        nehari_defect(pb, g, g.distance)


def test_nehari_defect_examples(solved_gamma2):
    pb, g, u = solved_gamma2
    E = solve_regularized(pb, g, 1e-8).energy_value
    assert abs(nehari_defect(pb, g, u)) <= 1e-6 * pb.p * E
    assert nehari_defect(pb, g, 10 * u) > 0
    assert nehari_defect(pb, g, 0.01 * u) < 0


@pytest.mark.parametrize("pb", [ProblemSpec(p=3, gamma=1.5, theta=1.0, h=DataSpec.constant(2.0), resolution=128),
                                ProblemSpec(p=1.5, gamma=3.0, resolution=128)], ids=["p3_h", "p15"])
def test_nehari_defect_on_other_solutions(pb):
    g = pb.grid()
    r = solve_regularized(pb, g, 1e-8)
    assert abs(r.nehari_defect) <= 1e-6 * pb.p * r.energy_value


# -- compatibility ----------------------------------------------------------


@pytest.fixture(scope="module")
def phi_interval():
    g = build_grid(Domain.interval(), 256)
    return g, first_eigenpair(g, FinslerSpec.euclidean(1), 2.0).phi1.values


def test_compatibility_finite_for_admissible_power(phi_interval):
    g, phi = phi_interval
    pb = ProblemSpec(p=2, gamma=2.5)
    t = 0.55  # t(1 - gamma) = -0.825 > -1
    c = compatibility_integral(pb, g, phi, power=t)
    assert c.finite and np.isfinite(c.value)


def test_compatibility_divergent_for_phi_gamma3(phi_interval):
    g, phi = phi_interval
    c = compatibility_integral(ProblemSpec(p=2, gamma=3.0), g, phi)
    assert not c.finite and math.isinf(c.value)


def test_compatibility_of_constant_field_is_integral_of_f():
    g = build_grid(Domain.interval(), 64)
    pb = ProblemSpec(p=2, gamma=2.0, f=DataSpec.constant(3.0))
    assert compatibility_integral(pb, g, np.ones(g.n_vertices)).value == pytest.approx(3.0, rel=1e-12)
    with pytest.raises(ValueError):
        compatibility_integral(pb, g, -np.ones(g.n_vertices))
