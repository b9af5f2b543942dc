import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cases import disk_2d, oracle_error, radial_1d, reference_1d
from deadcore.core import Grid, Params, ScalarField, make_params
from deadcore.freeboundary import extract_sets
from deadcore.oracle import radial_oracle
from deadcore.solver import (ConvergenceError, Problem, SolverConfig, coarsen, comparison_check,
                             energy, energy_gradient, initial_guess, solve)


def unit_square(n=17, p=2, q=0):
    return Problem.box(make_params(2, p, q), Grid.box([0, 0], [1, 1], n), 0.0)


def check_invariants(prob, sol):
    assert np.all(np.diff(sol.energy_trace) <= 0)
    assert sol.values.min() >= 0
    fixed = prob.fixed_mask
    np.testing.assert_array_equal(sol.values[fixed], prob.boundary_data.values[fixed])
    assert sol.values.max() <= prob.boundary_data.values[fixed].max() + 1e-10


# configuration and problem validation

@pytest.mark.parametrize("kw", [dict(max_iters=0), dict(tol_residual=0.0), dict(armijo_c=1.0),
                                dict(armijo_shrink=0.0), dict(epsilon_schedule=()),
                                dict(epsilon_schedule=(2.0, -1.0))])
def test_solver_config_rejects(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_problem_validation():
    prm = make_params(1, 2, 0)
    g = Grid.box([0], [1], 9)
    with pytest.raises(ValueError, match="nonnegative"):
        Problem.box(prm, g, -1.0)
    with pytest.raises(ValueError, match="params.N"):
        Problem.box(make_params(2, 2, 0), g, 1.0)
    with pytest.raises(ValueError, match="inside"):
        Problem.disk(make_params(2, 2, 0), Grid.box([-1, -1], [1, 1], 9), 1.5, 1.0)


def test_disk_masks():
    prob = Problem.disk(make_params(2, 2, 0), Grid.box([-2, -2], [2, 2], 33), 2.0, 1.0)
    r = prob.grid.radius((0, 0))
    assert np.all(r[prob.free_mask] < 2.0)
    assert np.all(prob.boundary_data.values[~prob.free_mask] == 1.0)
    assert prob.collar_mask(1).sum() < prob.free_mask.sum()


# energy

def test_energy_examples():
    prob = unit_square()
    z = np.zeros(prob.grid.shape)
    assert energy(prob, z) == 0.0
    assert energy(prob, z + 0.7) == pytest.approx(0.7, rel=1e-14)
    # q = p - 1 is outside the dead-core regime but the energy is still defined
    prob1 = Problem.box(Params(1, 2.0, 1.0), Grid.box([0], [1], 1025), lambda x: x)
    assert energy(prob1, prob1.grid.axes()[0]) == pytest.approx(2 / 3, abs=1e-6)


def test_energy_gradient_at_oracle_is_small():
    prob, _, o = reference_1d()
    g = energy_gradient(prob, o.on_grid(prob.grid)).values
    x = prob.grid.axes()[0]
    h = prob.grid.h[0]
    keep = np.abs(np.abs(x) - 1) > 1.5 * h
    assert np.abs(g[keep]).max() <= h


def test_energy_gradient_zero_field():
    prob = unit_square(p=3, q=0.5)
    assert np.all(energy_gradient(prob, np.zeros(prob.grid.shape)).values == 0)


def directional_mismatch(prob, v, eps, rng, k=10, step=1e-5):
    grad = energy_gradient(prob, v, eps).values * prob.grid.cell_volume
    free = prob.free_mask
    worst = 0.0
    for _ in range(k):
        d = np.where(free, rng.normal(size=v.shape), 0.0)
        fd = (energy(prob, v + step * d, eps) - energy(prob, v - step * d, eps)) / (2 * step)
        an = float(np.sum(grad * d))
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-300))
    return worst


def test_energy_gradient_finite_differences_33():
    rng = np.random.default_rng(3)
    prob = Problem.box(make_params(2, 3, 0.5), Grid.box([0, 0], [1, 1], 33), 1.0)
    v = np.where(prob.free_mask, 0.5 + rng.uniform(size=prob.grid.shape), 1.0)
    assert directional_mismatch(prob, v, prob.grid.hmin, rng) <= 1e-6


@settings(max_examples=15, deadline=None)
@given(p=st.floats(2, 6), q=st.floats(0, 0.9), seed=st.integers(0, 2 ** 31),
       eps=st.sampled_from([None, 0.05]))
def test_energy_gradient_finite_differences_random(p, q, seed, eps):
    q = q * (p - 1)
    rng = np.random.default_rng(seed)
    prob = Problem.box(make_params(2, p, q), Grid.box([0, 0], [1, 1], 12), 1.0)
    v = np.where(prob.free_mask, 0.2 + rng.uniform(size=prob.grid.shape), 1.0)
    assert directional_mismatch(prob, v, eps if eps is not None else prob.grid.hmin, rng) <= 1e-6


def test_initial_guess_in_range():
    prob = Problem.box(make_params(2, 2, 0), Grid.box([0, 0], [1, 1], 17), lambda x, y: x)
    u = initial_guess(prob)
    assert u.min() >= 0 and u.max() <= 1.0


def test_coarsen():
    prob, _, _ = reference_1d()
    c = coarsen(prob)
    assert c.grid.n == (513,) and c.grid.h[0] == 2 * prob.grid.h[0]
    assert coarsen(Problem.box(make_params(1, 2, 0), Grid.box([0], [1], 10), 1.0)) is None


# solve

def test_reference_1d():
    prob, sol, o = reference_1d()
    assert sol.converged
    assert oracle_error(sol, o) <= 5e-3
    dead, _ = extract_sets(sol, prob.grid.h[0] ** 2)
    xs = prob.grid.axes()[0][dead.mask()]
    assert abs(xs.min() + 1) <= 2 * prob.grid.h[0] and abs(xs.max() - 1) <= 2 * prob.grid.h[0]
    check_invariants(prob, sol)


def test_disk_2d_pointed_dead_core():
    prob, sol = disk_2d()
    assert sol.converged
    exact = prob.grid.radius((0, 0)) ** 2 / 4
    err = np.abs(sol.values - exact)[prob.collar_mask(1)]
    assert err.max() <= 1e-2
    check_invariants(prob, sol)


def test_zero_data_one_iteration():
    prob = unit_square()
    sol = solve(prob)
    assert sol.converged and sol.iterations == 1
    assert np.all(sol.values == 0)


def test_nonconvergence_reported():
    prob, _, _ = reference_1d()
    sol = solve(prob, SolverConfig(max_iters=2), nested=False)
    assert not sol.converged
    assert "stages" in sol.diagnostics
    check_invariants(prob, sol)


def test_deterministic():
    prob = Problem.box(make_params(1, 3, 1), Grid.box([-2], [2], 257), 0.5)
    a, b = solve(prob), solve(prob)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.energy_trace == b.energy_trace


@pytest.mark.parametrize("p,q", [(2, 0), (3, 1), (4, 1.5), (6, 2), (3, 0)])
def test_invariants_on_1d_runs(p, q):
    prob, sol, o = radial_1d(p, q, n=513)
    assert sol.converged
    check_invariants(prob, sol)
    assert oracle_error(sol, o) <= 1e-3


def test_invariants_on_2d_nonradial():
    g = Grid.box([0, 0], [1, 1], 33)
    prob = Problem.box(make_params(2, 3, 1), g, lambda x, y: 0.02 * (x + y) ** 2)
    sol = solve(prob)
    assert sol.converged
    check_invariants(prob, sol)
    assert extract_sets(sol)[0].indices.size > 0


def test_refinement_order():
    errs = []
    for n in (257, 513, 1025):
        _, sol, o = radial_1d(3, 1, n=n, r0=0.3)
        errs.append(oracle_error(sol, o))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 0.9)


def test_dead_core_grows_with_lambda():
    g = Grid.box([-2], [2], 513)
    h = g.h[0]
    cores = []
    for lam in (1.0, 2.0):
        s = solve(Problem.box(make_params(1, 2, 0, lam), g, 0.5))
        cores.append(g.axes()[0][extract_sets(s)[0].mask()])
    assert cores[1].min() <= cores[0].min() + h and cores[1].max() >= cores[0].max() - h
    assert len(cores[1]) > len(cores[0])


def test_nonconstant_lambda():
    g = Grid.box([-2], [2], 257)
    lam = 1.0 + 0.5 * np.cos(g.axes()[0])
    prob = Problem.box(make_params(1, 2, 0, lam), g, 0.5)
    sol = solve(prob)
    assert sol.converged
    check_invariants(prob, sol)


# comparison

def box(kappa, n=257, p=2, q=0):
    return Problem.box(make_params(1, p, q), Grid.box([-2], [2], n), kappa)


def test_comparison_zero_vs_kappa():
    res = comparison_check(box(0.0), box(0.5))
    assert res.ordered and np.all(res.low.values == 0)


def test_comparison_nested_oracles():
    res = comparison_check(box(0.3, 1025), box(0.5, 1025))
    assert res.ordered
    prm = make_params(1, 2, 0)
    for sol, k in ((res.low, 0.3), (res.high, 0.5)):
        assert oracle_error(sol, radial_oracle(prm, 2.0, k)) <= 5e-3


def test_comparison_equal_data():
    res = comparison_check(box(0.4), box(0.4))
    assert res.ordered and abs(res.max_violation) <= 1e-8


def test_comparison_rejects_unordered():
    with pytest.raises(ValueError):
        comparison_check(box(0.5), box(0.3))
    with pytest.raises(ValueError):
        comparison_check(box(0.3), box(0.5, p=3, q=1))


def test_comparison_propagates_nonconvergence():
    with pytest.raises(ConvergenceError):
        comparison_check(box(0.3), box(0.5), SolverConfig(max_iters=1))


def test_solution_field_type():
    _, sol, _ = reference_1d()
    assert isinstance(sol.field, ScalarField)
    assert sol.residual_norm <= SolverConfig().tol_residual
