"""Dead-core solutions as minimizers of the constrained p-energy.

The discrete functional is

    E(v) = sum_elements w |grad v|_eps^p / p + sum_nodes c_i lambda0_i v_i^(q+1) / (q+1)

over ``v >= 0`` with Dirichlet values held fixed. The absorption term uses
nodal (trapezoid) weights ``c_i`` so its gradient is the pointwise
``lambda0 v^q``. Minimization is projected descent with an Armijo line search
along the projection arc. The descent metric is the energy Hessian restricted
to the inactive set (the set that is not pinned at zero), which makes the
iteration usable at grid sizes where plain gradient steps need ~h^-2 iterations.

For large p the energy is dominated by the steep part of the profile and the
flat part near the dead core changes it by far less than its rounding error.
Two things keep that regime honest: steps only move nodes whose Newton-scaled
residual (residual over Hessian diagonal, a length in units of v) is not yet
converged, and the line search compares energies through a sum of per-term
changes rather than a difference of totals.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import Grid, Params, ScalarField, Solution
from .pde_ops import (dirichlet_energy, dirichlet_energy_change, dirichlet_energy_gradient,
                      dirichlet_energy_hessian, positive_power, power_change)

log = logging.getLogger(__name__)
FREEZE = 0.1


class ConvergenceError(RuntimeError):
    """A solve that callers required to converge did not."""

    def __init__(self, msg, solution=None):
        super().__init__(msg)
        self.solution = solution


@dataclass(frozen=True, eq=False)
class Problem:
    params: Params
    grid: Grid
    boundary_data: ScalarField
    domain_mask: Optional[np.ndarray] = None
    center: Optional[tuple] = None
    radius: Optional[float] = None

    def __post_init__(self):
        if self.params.N != self.grid.dim:
            raise ValueError(f"params.N={self.params.N} but grid is {self.grid.dim}D")
        self.params.lambda0_field(self.grid.shape)
        if self.domain_mask is not None:
            m = np.asarray(self.domain_mask, dtype=bool).reshape(self.grid.shape).copy()
            m.flags.writeable = False
            object.__setattr__(self, "domain_mask", m)
        g = self.boundary_data.values[self.fixed_mask]
        if np.any(g < 0):
            raise ValueError("boundary data must be nonnegative")

    @classmethod
    def box(cls, params: Params, grid: Grid, g) -> "Problem":
        """Dirichlet problem on the grid's box; ``g`` is a constant, a nodal array or ``g(*coords)``."""
        if callable(g):
            values = np.asarray(g(*grid.coords()), dtype=float)
        else:
            values = np.broadcast_to(np.asarray(g, dtype=float), grid.shape)
        data = np.where(grid.boundary_mask, values, 0.0)
        return cls(params, grid, ScalarField(grid, data))

    @classmethod
    def disk(cls, params: Params, grid: Grid, R: float, kappa: float, center=None) -> "Problem":
        """Ball ``B_R(center)`` carved from the grid; every node outside it holds ``kappa``."""
        center = tuple(np.zeros(grid.dim)) if center is None else tuple(np.atleast_1d(center))
        inside = grid.radius(center) < R
        if np.any(inside & grid.boundary_mask):
            raise ValueError("disk must lie strictly inside the grid box")
        data = np.where(inside, 0.0, float(kappa))
        return cls(params, grid, ScalarField(grid, data), inside, center, float(R))

    @property
    def free_mask(self) -> np.ndarray:
        free = ~self.grid.boundary_mask
        if self.domain_mask is not None:
            free &= self.domain_mask
        return free

    @property
    def fixed_mask(self) -> np.ndarray:
        return ~self.free_mask

    def lambda0(self) -> np.ndarray:
        return self.params.lambda0_field(self.grid.shape)

    def distance_to_boundary(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.domain_mask is not None and self.radius is not None:
            return self.radius - np.linalg.norm(x - np.asarray(self.center), axis=1)
        return self.grid.distance_to_box(x)

    def collar_mask(self, width: float = 1.0) -> np.ndarray:
        """Free nodes at least ``width`` grid spacings from the boundary of the domain."""
        d = self.distance_to_boundary(self.grid.points()).reshape(self.grid.shape)
        return self.free_mask & (d >= width * self.grid.hmin - 1e-12)


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 2000
    tol_residual: float = 1e-8
    tol_energy: float = 1e-10
    step0: float = 1.0
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    epsilon_schedule: tuple = (8.0, 4.0, 2.0, 1.0)  # multiples of the grid spacing
    stage_tol_factor: float = 1e3  # residual tolerance relaxation on non-final stages
    jacobi_sweeps: int = 50
    max_backtracks: int = 60
    tol_scaled: float = 1e-10  # Newton-scaled residual, in units of v
    max_expand: int = 6  # step doublings tried after a full step is accepted
    polish: bool = True  # finish on the unregularized energy with its exact Hessian

    def __post_init__(self):
        if min(self.max_iters, self.tol_residual, self.tol_energy, self.step0, self.tol_scaled) <= 0:
            raise ValueError("max_iters, tolerances and step0 must be positive")
        if not (0 < self.armijo_c < 1 and 0 < self.armijo_shrink < 1):
            raise ValueError("Armijo constants must lie in (0, 1)")
        if not self.epsilon_schedule or any(e <= 0 for e in self.epsilon_schedule):
            raise ValueError("epsilon schedule must be a nonempty list of positive multiples of h")


def _nodal_weights(grid: Grid) -> np.ndarray:
    w = np.ones(grid.shape)
    for ax in range(grid.dim):
        for end in (0, -1):
            idx = [slice(None)] * grid.dim
            idx[ax] = end
            w[tuple(idx)] *= 0.5
    return w * grid.cell_volume


def _absorption(v, q):
    return positive_power(v, q + 1) / (q + 1)


def energy(problem: Problem, field, epsilon: float = 0.0) -> float:
    """Discrete energy; ``epsilon`` regularizes ``|grad v|`` as ``sqrt(|grad v|^2 + eps^2)``."""
    v = np.asarray(getattr(field, "values", field), dtype=float)
    p, q = problem.params.p, problem.params.q
    grid = problem.grid
    e = dirichlet_energy(v, grid, p, epsilon)
    return float(e + np.sum(_nodal_weights(grid) * problem.lambda0() * _absorption(v, q)))


def energy_gradient(problem: Problem, field, epsilon: Optional[float] = None) -> ScalarField:
    """Nodal derivative of :func:`energy` per unit volume: ``-Delta_p^eps v + lambda0 v_+^q``.

    Zero on Dirichlet nodes. ``v_+^q`` is taken as 0 at ``v = 0`` (also for ``q = 0``).
    ``epsilon`` defaults to one grid spacing.
    """
    grid = problem.grid
    eps = grid.hmin if epsilon is None else epsilon
    v = np.asarray(getattr(field, "values", field), dtype=float)
    g = dirichlet_energy_gradient(v, grid, problem.params.p, eps) / grid.cell_volume
    g += problem.lambda0() * positive_power(v, problem.params.q)
    g[problem.fixed_mask] = 0.0
    return ScalarField(grid, g)


def initial_guess(problem: Problem, sweeps: int = 50) -> np.ndarray:
    """Mean of the boundary data smoothed by Jacobi sweeps of the 5-point Laplacian."""
    grid = problem.grid
    fixed = problem.fixed_mask
    g = problem.boundary_data.values
    u = np.where(fixed, g, np.mean(g[fixed]))
    w = [1.0 / h ** 2 for h in grid.h]
    for _ in range(sweeps):
        acc = np.zeros_like(u)
        for ax in range(grid.dim):
            acc += w[ax] * (np.roll(u, 1, axis=ax) + np.roll(u, -1, axis=ax))
        u = np.where(fixed, u, acc / (2 * sum(w)))
    return np.maximum(u, 0.0)


class _Stage:
    """Energy pieces at one regularization level, on flat arrays."""

    def __init__(self, problem: Problem, eps: float, metric_eps: Optional[float] = None):
        self.problem = problem
        self.grid = problem.grid
        self.eps = eps
        self.metric_eps = eps if metric_eps is None else metric_eps
        self.p, self.q = problem.params.p, problem.params.q
        self.mass = (_nodal_weights(self.grid) * problem.lambda0())
        self.cv = self.grid.cell_volume

    def energy(self, u):
        return dirichlet_energy(u, self.grid, self.p, self.eps) + float(
            np.sum(self.mass * _absorption(u, self.q)))

    def energy_change(self, u, v) -> float:
        terms = dirichlet_energy_change(u, v, self.grid, self.p, self.eps).ravel()
        absorb = self.mass * power_change(u, v - u, self.q + 1) / (self.q + 1)
        return math.fsum(np.concatenate([terms, absorb.ravel()]))

    def gradient(self, u):
        # right derivative at v = 0, the one the bound constraint sees
        react = positive_power(u, self.q) if self.q > 0 else (u >= 0).astype(float)
        return dirichlet_energy_gradient(u, self.grid, self.p, self.eps) + self.mass * react

    def hessian(self, u):
        H = dirichlet_energy_hessian(u, self.grid, self.p, self.metric_eps)
        if self.q > 0:
            with np.errstate(divide="ignore"):
                curv = np.where(u > 0, self.q * np.where(u > 0, u, 1.0) ** (self.q - 1), 0.0)
            H = H + sp.diags((self.mass * curv).ravel())
        return H.tocsr()


def _kkt_residual(gd, u, free):
    pos = free & (u > 0)
    zero = free & (u <= 0)
    r_pos = float(np.max(np.abs(gd[pos]))) if pos.any() else 0.0
    r_zero = float(np.max(np.maximum(-gd[zero], 0.0))) if zero.any() else 0.0
    return r_pos, r_zero


def _scaled_residual(g, diag, u, free):
    """KKT residual divided by the Hessian diagonal, zero where the bound is correctly active."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r = np.where(diag > 0, g / np.where(diag > 0, diag, 1.0), 0.0)
    r = np.where((u <= 0) & (g >= 0), 0.0, r)
    return np.where(free, r, 0.0)


def _try_step(stage, uf, direction, gf, movable, t, shape):
    v = uf + t * direction
    v = np.where(movable, np.maximum(v, 0.0), uf)
    dv = v - uf
    moved = dv != 0
    if not moved.any():
        return None
    slope = math.fsum(gf[moved] * dv[moved])
    if not slope < 0:
        return None
    de = stage.energy_change(uf.reshape(shape), v.reshape(shape))
    if not np.isfinite(de):
        return None
    return v, de, slope


def _line_search(stage, uf, gf, H, sr, block, config, shape):
    """Armijo search on the block's Newton direction, then on the scaled residual."""
    d = np.zeros_like(uf)
    # unit-diagonal scaling: curvatures span hundreds of decades at large p
    root = 1.0 / np.sqrt(H.diagonal()[block])
    Dr = sp.diags(root)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", spla.MatrixRankWarning)
        sol = root * spla.spsolve((Dr @ H[block][:, block] @ Dr).tocsc(), -root * gf[block])
    d[block] = sol if np.all(np.isfinite(sol)) else -sr[block]
    rejected = 0
    for direction in (d, np.where(block, -sr, 0.0)):
        t = config.step0
        step = None
        for _ in range(config.max_backtracks):
            trial = _try_step(stage, uf, direction, gf, block, t, shape)
            if trial is not None and trial[1] < 0 and trial[1] <= config.armijo_c * trial[2]:
                step = trial
                break
            t *= config.armijo_shrink
            rejected += 1
        if step is None:
            continue
        if t == config.step0:
            # degenerate minima (q > 0 near the dead core) make full Newton steps short
            for _ in range(config.max_expand):
                t *= 2
                trial = _try_step(stage, uf, direction, gf, block, t, shape)
                if trial is None or not trial[1] < step[1]:
                    break
                step = trial
        return step, rejected
    return None, rejected


def _descend(stage: _Stage, u, tol, config: SolverConfig, trace, budget):
    free = stage.problem.free_mask
    ff = free.ravel()
    e = stage.energy(u)
    tol_s = config.tol_scaled * (tol / config.tol_residual)
    last_rel = None
    it = 0
    stalled = False
    accepted = rejected = 0
    with np.errstate(over="ignore", under="ignore"):
        while True:
            g = stage.gradient(u)
            gd = g / stage.cv
            r_pos, r_zero = _kkt_residual(gd, u, free)
            H = stage.hessian(u)
            diag = H.diagonal()
            uf, gf = u.ravel(), g.ravel()
            sr = _scaled_residual(gf, diag, uf, ff)
            res_s = float(np.max(np.abs(sr)))
            res = max(r_pos, r_zero)
            energy_ok = last_rel is None or last_rel <= config.tol_energy
            done = res <= tol and res_s <= tol_s
            if (done and energy_ok) or stalled or it >= budget:
                return u, dict(converged=bool(done and (energy_ok or stalled)), iterations=it,
                               residual=r_pos, kkt=res, scaled=res_s, accepted=accepted,
                               rejected=rejected, stalled=stalled)
            it += 1

            active = ff & (uf <= 0) & (gf > 0)
            # rows whose curvature underflowed carry no information the step could use
            inactive = ff & ~active & (diag > 0)
            unresolved = inactive & (np.abs(sr) > FREEZE * tol_s)
            # full Newton first; once the total energy no longer resolves progress,
            # move only the nodes that are still unconverged
            blocks = [inactive, unresolved]
            if last_rel is not None and last_rel <= config.tol_energy:
                blocks = blocks[::-1]
            step = None
            for block in blocks:
                if not block.any():
                    continue
                step, tried = _line_search(stage, uf, gf, H, sr, block, config, u.shape)
                rejected += tried
                if step is not None:
                    break
            if step is None:
                stalled = True
                continue
            v, de, _ = step
            last_rel = -de / max(abs(e), 1e-300)
            u = v.reshape(u.shape)
            e = min(e + de, e)
            trace.append(e)
            accepted += 1


def coarsen(problem: Problem, min_nodes: int = 9) -> Optional[Problem]:
    """Same problem on every other node, or None when the grid cannot be halved."""
    grid = problem.grid
    if any((k - 1) % 2 or (k - 1) // 2 + 1 < min_nodes for k in grid.n):
        return None
    sub = (slice(None, None, 2),) * grid.dim
    coarse = Grid(grid.dim, grid.origin, grid.extent, tuple((k - 1) // 2 + 1 for k in grid.n))
    lam = problem.params.lambda0
    params = problem.params if problem.params.constant_lambda0 else problem.params.with_(
        lambda0=np.asarray(lam)[sub])
    if problem.domain_mask is not None and problem.radius is not None:
        kappa = float(np.max(problem.boundary_data.values))
        try:
            return Problem.disk(params, coarse, problem.radius, kappa, problem.center)
        except ValueError:
            return None
    return Problem(params, coarse, ScalarField(coarse, problem.boundary_data.values[sub]))


def _prolong(u_coarse: np.ndarray, coarse: Grid, fine: Grid) -> np.ndarray:
    """Linear (1D) or bilinear (2D) interpolation onto the refined grid."""
    if fine.dim == 1:
        return np.interp(fine.axes()[0], coarse.axes()[0], u_coarse)
    u = np.zeros(fine.shape)
    u[::2, ::2] = u_coarse
    u[1::2, ::2] = 0.5 * (u_coarse[:-1] + u_coarse[1:])
    u[:, 1::2] = 0.5 * (u[:, :-2:2] + u[:, 2::2])
    return u


def solve(problem: Problem, config: SolverConfig = SolverConfig(), nested: bool = True) -> Solution:
    """Minimize the constrained energy with epsilon continuation.

    With ``nested=True`` the problem is first solved on the grid with every
    other node removed (recursively) and the interpolated result is the
    starting point; otherwise the start is :func:`initial_guess`. A warm start
    already resolves the free boundary to about one coarse cell, which the
    active-set iteration could otherwise only move one node per step.

    Each epsilon stage warm-starts from the previous one; the last stage uses
    the final entry of ``epsilon_schedule`` (one grid spacing by default) and
    the full residual tolerance. Non-convergence is reported through
    ``Solution.converged`` and ``Solution.diagnostics``, never raised.
    """
    grid = problem.grid
    h = grid.hmin
    fixed = problem.fixed_mask
    schedule = tuple(config.epsilon_schedule)
    coarse_info = None
    coarse = coarsen(problem) if nested else None
    if coarse is not None:
        cs = solve(coarse, config, nested=True)
        u = _prolong(cs.values, coarse.grid, grid)
        # the coarse solve ended at eps = 2h on this grid
        schedule = tuple(m for m in schedule if m <= 2 * schedule[-1]) or schedule[-1:]
        coarse_info = dict(n=list(coarse.grid.n), iterations=cs.iterations, converged=cs.converged,
                           coarse=cs.diagnostics.get("coarse"))
    else:
        u = initial_guess(problem, config.jacobi_sweeps)
    u = np.where(fixed, problem.boundary_data.values, np.maximum(u, 0.0))
    trace = []
    stages = []
    used = 0
    info = {}
    plan = [(m * h, m * h) for m in schedule]
    if config.polish:
        plan.append((0.0, 0.0))
    for k, (eps, metric_eps) in enumerate(plan):
        stage = _Stage(problem, eps, metric_eps)
        if not trace:
            trace.append(stage.energy(u))
        final = k == len(plan) - 1
        tol = config.tol_residual * (1.0 if final else config.stage_tol_factor)
        u, info = _descend(stage, u, tol, config, trace, config.max_iters - used)
        used += info["iterations"]
        stages.append(dict(epsilon=eps, metric_epsilon=metric_eps, **info))
        log.debug("n=%s stage eps=%g: %s", grid.n, eps, info)
        if used >= config.max_iters and not final:
            info = dict(info, converged=False)
            break
    converged = bool(info.get("converged")) and len(stages) == len(plan)
    u = np.where(fixed, problem.boundary_data.values, u)
    return Solution(
        field=ScalarField(grid, u),
        params=problem.params,
        boundary_data=problem.boundary_data,
        energy_trace=trace,
        residual_norm=float(info["residual"]),
        iterations=max(used, 1),
        converged=converged,
        problem=problem,
        diagnostics=dict(stages=stages, kkt_residual=float(info["kkt"]),
                         scaled_residual=float(info["scaled"]),
                         epsilon=plan[-1][0], coarse=coarse_info),
    )


@dataclass
class ComparisonResult:
    ordered: bool
    max_violation: float
    low: Solution = field(repr=False)
    high: Solution = field(repr=False)


def comparison_check(problem_low: Problem, problem_high: Problem,
                     config: SolverConfig = SolverConfig(), atol: float = 1e-8) -> ComparisonResult:
    """Solve both problems and test ``u_low <= u_high + atol`` at every node."""
    if problem_low.grid.shape != problem_high.grid.shape or problem_low.params.to_dict() != problem_high.params.to_dict():
        raise ValueError("comparison needs identical grids and parameters")
    fixed = problem_low.fixed_mask
    if np.any(problem_low.boundary_data.values[fixed] > problem_high.boundary_data.values[fixed]):
        raise ValueError("boundary data are not ordered (need g_low <= g_high)")
    sols = []
    for prob in (problem_low, problem_high):
        s = solve(prob, config)
        if not s.converged:
            raise ConvergenceError("solver did not converge in comparison check", s)
        sols.append(s)
    diff = sols[0].values - sols[1].values
    viol = float(np.max(diff))
    return ComparisonResult(bool(viol <= atol), viol, sols[0], sols[1])
