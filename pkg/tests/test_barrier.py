import dataclasses
import math

import numpy as np
import pytest

from builders import dam_problem
from fbporosity.barrier import (BarrierConstants, ExtendedCoefficients, PreconditionError, barrier_bounds,
                                bump_height, bump_slope, clearance_radius, comparison_test, default_sweep,
                                epsilon0, estimate_C2, gradient_trace_bound, lipschitz_constant, make_cutoff,
                                mirror_extend, solve_barrier, supersolution_flux_check)
from fbporosity.domain import ParameterError
from fbporosity.grid import Grid, GridField
from fbporosity.solver import Solution

X0 = (0.5, 0.7)


@pytest.fixture(scope="module")
def dam_cf():
    return dam_problem(65)[1]


@pytest.fixture(scope="module")
def sloped_cf():
    return dam_problem(65, h="1 + x2/4", h_upper=1.25)[1]


def test_cutoff_values():
    th = make_cutoff()
    assert th(0.0) == -1.0
    assert th(2.0) == 1.0
    assert th(0.25) == -1.0 and th(1.0) == 1.0
    assert abs(th(5 / 8)) < 1e-15
    assert th.theta0 == 10.0


def test_cutoff_derivative_and_theta0_numerically():
    th = make_cutoff()
    t = np.linspace(0, 1.2, 10_001)
    fd = np.gradient(th(t), t)
    assert np.max(np.abs(fd - th.derivative(t))) < 1e-3
    # central differences on the smooth interior match to 1e-6
    k = 1e-5
    tt = np.linspace(0.26, 0.99, 10_000)
    cd = (th(tt + k) - th(tt - k)) / (2 * k)
    assert np.max(np.abs(cd - th.derivative(tt))) < 1e-6
    assert abs(2 * np.max(np.abs(th.derivative(np.linspace(0, 1, 10_001)))) - th.theta0) < 1e-6
    assert np.all(th.derivative(np.array([0.0, 0.2, 1.0, 1.5])) == 0)


def test_bump_height_examples():
    th = make_cutoff()
    r, l = 0.1, 1.0
    assert bump_height(th, np.array([0.3 + r / 4]), np.array([0.3]), r, l) == pytest.approx(l - r, abs=1e-15)
    assert bump_height(th, np.array([0.3 + 2 * r]), np.array([0.3]), r, l) == pytest.approx(l + r, abs=1e-15)
    assert bump_height(th, np.array([0.3 + r * math.sqrt(5 / 8)]), np.array([0.3]), r, l) == pytest.approx(l, abs=1e-14)


def test_bump_slope_bounded_by_theta0():
    th = make_cutoff()
    x = np.linspace(-0.3, 0.3, 2001)[:, None]
    s = bump_slope(th, x, np.zeros(1), 0.1)
    assert np.max(np.abs(s)) <= th.theta0
    assert np.all(s[np.abs(x[:, 0]) < 0.05] == 0)


def test_mirror_extend_examples():
    g = Grid.from_bounds((0, 0), (1, 1), (5, 9))
    const = mirror_extend(None, GridField(g, np.full(g.shape, 2.5)))
    assert np.all(const.values == 2.5)
    assert const.grid.upper[-1] == pytest.approx(2.0)
    z = g.mesh()[1]
    ext = mirror_extend(None, GridField(g, z))
    ze = ext.grid.mesh()[1]
    upper = ze > 1
    assert np.allclose(ext.values[upper], 2 - ze[upper])
    assert np.allclose(ext.values[:, 8], z[:, 8])


def test_barrier_boundary_values(dam_cf):
    r, eps = 0.05, 0.2
    b = solve_barrier(dam_cf, X0, r, eps, cells_per_r=16)
    j_bottom = 0
    i_mid = b.grid.index_of((X0[0], 0))[0]
    assert b.v.values[i_mid, j_bottom] == pytest.approx(eps * r / 3, rel=1e-12)
    assert np.all(b.v.values[tuple(b.graph_nodes.T)] == 0)
    bounds = barrier_bounds(b)
    assert bounds["within_bounds"] and bounds["graph_zero"]


def test_barrier_harmonic_max_on_boundary(dam_cf):
    b = solve_barrier(dam_cf, X0, 0.05, 0.3, cells_per_r=16)
    v = b.v.values
    assert v[b.interior].max() <= v[~b.interior].max()
    assert v.max() <= b.epsilon * b.r


def test_barrier_linear_in_epsilon(dam_cf):
    b1 = solve_barrier(dam_cf, X0, 0.04, 0.1, cells_per_r=16)
    b2 = solve_barrier(dam_cf, X0, 0.04, 0.2, cells_per_r=16)
    assert np.max(np.abs(b2.v.values - 2 * b1.v.values)) < 1e-14


def test_barrier_preconditions(dam_cf):
    r0 = clearance_radius(dam_cf.grid, X0)
    assert r0 == pytest.approx(0.15, rel=1e-6)
    with pytest.raises(PreconditionError):
        solve_barrier(dam_cf, X0, r0, 0.1)
    with pytest.raises(PreconditionError):
        solve_barrier(dam_cf, X0, 0.01, 1.0)
    with pytest.raises(PreconditionError):
        solve_barrier(dam_cf, (0.5, 0.99), 0.01, 0.1)


def _slope(eps, vals):
    return np.polyfit(np.log(eps), np.log(vals), 1)[0]


def test_trace_vanishes_with_epsilon(dam_cf):
    t = [gradient_trace_bound(solve_barrier(dam_cf, X0, 0.03, e, cells_per_r=16)) for e in (1e-2, 1e-4, 1e-6)]
    assert t[0] > t[1] > t[2] and t[2] < 1e-5


def test_trace_slope_constant_h(dam_cf):
    eps = [2.0 ** -k for k in range(2, 7)]
    t = [gradient_trace_bound(solve_barrier(dam_cf, X0, 0.03, e, cells_per_r=16)) for e in eps]
    assert _slope(eps, t) == pytest.approx(1.0, abs=1e-9)


def test_trace_slope_increasing_h(sloped_cf):
    eps = [2.0 ** -k for k in range(2, 7)]
    t = [gradient_trace_bound(solve_barrier(sloped_cf, X0, 0.03, e, cells_per_r=16)) for e in eps]
    assert _slope(eps, t) >= 1 - 2 / 4 - 0.2


def test_C2_single_sample(dam_cf):
    b = solve_barrier(dam_cf, X0, 0.03, 0.1, cells_per_r=16)
    C2 = estimate_C2(dam_cf, X0, [(0.1, 0.03)], cells_per_r=16)
    assert C2 == gradient_trace_bound(b) / 0.1 ** 0.5


def test_C2_superset_monotone(dam_cf):
    small = [(0.1, 0.03)]
    big = small + [(0.25, 0.03), (0.05, 0.02)]
    assert estimate_C2(dam_cf, X0, big, cells_per_r=16) >= estimate_C2(dam_cf, X0, small, cells_per_r=16)


def test_C2_reproducible(sloped_cf):
    sweep = default_sweep([0.25, 0.0625], [0.5], clearance_radius(sloped_cf.grid, X0))
    a = estimate_C2(sloped_cf, X0, sweep, cells_per_r=16)
    b = estimate_C2(sloped_cf, X0, sweep, cells_per_r=16)
    assert abs(a - b) <= 1e-12 * abs(a)


def test_epsilon0_examples():
    assert epsilon0(1, 1, 1, 0.0, 4, 2) == 1 - 1e-9
    assert epsilon0(1, 1, 1, math.sqrt(3), 4, 2) == pytest.approx(0.25, rel=1e-14)
    assert epsilon0(1, 1, 1, 10.0, 4, 2) == pytest.approx(1 / 101, rel=1e-14)
    with pytest.raises(ParameterError):
        epsilon0(1, 1, 1, 10.0, 2, 2)


def test_constants_validation():
    with pytest.raises(ParameterError):
        BarrierConstants(C1=0, C2=1, theta0=10, epsilon0=0.1, r0=0.1, r1=0.1, C3=1)


@pytest.fixture(scope="module")
def dam_consts(dam_cf):
    r0 = clearance_radius(dam_cf.grid, X0)
    C2 = estimate_C2(dam_cf, X0, default_sweep([0.25, 0.0625], [0.5, 0.25], r0), cells_per_r=16)
    return BarrierConstants.build(1.0, C2, dam_cf, r0, X0)


def test_flux_check_at_epsilon0(dam_cf, dam_consts):
    for frac in (0.5, 0.25, 0.125):
        b = solve_barrier(dam_cf, X0, frac * dam_consts.r1, dam_consts.epsilon0, cells_per_r=16)
        rep = supersolution_flux_check(b, dam_cf, 1e-6, dam_consts)
        assert rep["passed"] and rep["points"] > 0
        assert rep["flux_min_top"] >= dam_cf.h_lower - dam_cf.Lam * gradient_trace_bound(b) - 1e-9


def test_flux_check_zero_barrier(dam_cf):
    b = solve_barrier(dam_cf, X0, 0.04, 0.1, cells_per_r=16)
    zero = dataclasses.replace(b, v=GridField(b.grid, np.zeros(b.grid.shape)))
    rep = supersolution_flux_check(zero, dam_cf, 1e-12)
    assert rep["flux_min_top"] == pytest.approx(1.0)
    assert rep["flux_min_graph"] > 0
    assert rep["passed"]


def test_flux_check_rejects_large_radius(dam_cf, dam_consts):
    b = solve_barrier(dam_cf, X0, min(0.1, 2 * dam_consts.r1), dam_consts.epsilon0, cells_per_r=8)
    with pytest.raises(PreconditionError):
        supersolution_flux_check(b, dam_cf, 1e-6, dam_consts)


def _sol_from(grid, u):
    z = GridField(grid, np.zeros(grid.shape))
    return Solution(GridField(grid, u), z, np.zeros(grid.shape, np.int8), 0, True, {})


def test_comparison_zero_solution(dam_cf):
    b = solve_barrier(dam_cf, X0, 0.04, 0.1, cells_per_r=16)
    rep = comparison_test(_sol_from(dam_cf.grid, np.zeros(dam_cf.grid.shape)), b, 1e-12)
    assert rep["hypothesis"] and rep["conclusion"] and rep["status"] == "pass"


def test_comparison_low_reservoir():
    pb = dam_problem(65, left=0.4, right=0.2)
    from builders import solve
    sol = solve(pb)
    b = solve_barrier(pb[1], X0, 0.1, 0.2, cells_per_r=16)
    rep = comparison_test(sol, b, sol.params.threshold)
    assert rep["max_u_boundary"] == 0
    assert rep["status"] == "pass"


def test_comparison_not_applicable(dam_cf):
    b = solve_barrier(dam_cf, X0, 0.04, 0.1, cells_per_r=16)
    u = np.full(dam_cf.grid.shape, 2 * b.epsilon * b.r)
    rep = comparison_test(_sol_from(dam_cf.grid, u), b, 1e-12)
    assert not rep["hypothesis"]
    assert rep["status"] == "not-applicable" and rep["conclusion"] is None


def test_comparison_grid_mismatch(dam_cf):
    b = solve_barrier(dam_cf, X0, 0.04, 0.1, cells_per_r=16)
    g = Grid.from_bounds((0, 0), (0.3, 1), (5, 5))
    with pytest.raises(ValueError):
        comparison_test(_sol_from(g, np.zeros(g.shape)), b, 1e-12)


def test_lipschitz_of_linear_field():
    g = Grid.from_bounds((0, 0), (1, 1), (33, 33))
    x, z = g.mesh()
    sol = _sol_from(g, 2 * x + z)
    assert lipschitz_constant(sol, (0.5, 0.5), 0.2) == pytest.approx(math.sqrt(5))


def test_extended_coefficients_mirror(sloped_cf):
    ext = ExtendedCoefficients(sloped_cf)
    _, h = ext.sample(np.array([[0.5, 0.9], [0.5, 1.1]]))
    assert h[0] == pytest.approx(h[1])
