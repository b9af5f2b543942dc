"""Shared, cached reference solves (each is computed once per test session)."""

from functools import lru_cache

import numpy as np

from deadcore.core import Grid, make_params
from deadcore.oracle import radial_oracle, theta
from deadcore.solver import Problem, solve


@lru_cache(maxsize=None)
def reference_1d(n=1025):
    """(-2, 2), p=2, q=0, g=0.5: exact solution 0.5 (|x| - 1)_+^2."""
    prm = make_params(1, 2, 0)
    prob = Problem.box(prm, Grid.box([-2], [2], n), 0.5)
    return prob, solve(prob), radial_oracle(prm, 2.0, 0.5)


@lru_cache(maxsize=None)
def disk_2d(n=257):
    """Disk R=2, p=2, q=0, kappa=1: exact solution |x|^2 / 4 with a pointed dead core."""
    prm = make_params(2, 2, 0)
    prob = Problem.disk(prm, Grid.box([-2, -2], [2, 2], n), 2.0, 1.0)
    return prob, solve(prob)


def boundary_value(p, q, R, r0):
    """kappa placing the radial free boundary at |x| = r0 on (-R, R)."""
    return theta(1, 1.0, p, q) * (R - r0) ** (p / (p - 1 - q))


@lru_cache(maxsize=None)
def radial_1d(p, q, n=2049, R=2.0, r0=0.25):
    prm = make_params(1, p, q)
    kappa = boundary_value(p, q, R, r0)
    prob = Problem.box(prm, Grid.box([-R], [R], n), kappa)
    return prob, solve(prob), radial_oracle(prm, R, kappa)


def oracle_error(solution, oracle, mask=None):
    err = np.abs(solution.values - oracle.on_grid(solution.grid))
    return float(err[mask].max() if mask is not None else err.max())


@lru_cache(maxsize=None)
def sweep_half():
    """The ell = 1/2 sweep on (-3, 3), p = 4..64, 2049 nodes, with the limit measurements."""
    from deadcore.limit import SweepPlan, finalize_sweep, run_sweep
    return finalize_sweep(run_sweep(SweepPlan(0.5)))


def rounding_floor(u, grad_max, h):
    """Size of rounding noise in a second difference times |grad u|^2."""
    return 64 * np.finfo(float).eps * float(np.max(np.abs(u))) * grad_max ** 2 / h ** 2
