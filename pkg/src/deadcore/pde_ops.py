"""Finite-difference operators on uniform grids.

The p-Laplacian is discretized in divergence form as minus the gradient of a
discrete p-Dirichlet energy, so the solver's energy gradient and
:func:`p_laplacian` are the same computation.

* 1D: one element per edge, gradient ``(u[i+1] - u[i]) / h``, weight ``h``.
* 2D: every cell carries four corner elements. The corner gradient pairs one
  x-edge difference with one y-edge difference of the cell, and each corner
  gets a quarter of the cell area. This is the average of the two right-angle
  triangulations of the cell, so for ``p = 2`` the operator is exactly the
  5-point Laplacian and the stencil has no checkerboard null mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import Grid, ScalarField

SCHEMES = ("central", "one-sided-fallback")


@dataclass(frozen=True)
class OperatorConfig:
    epsilon: float = 0.0
    scheme: str = "central"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: Grid
    components: np.ndarray  # shape (dim, *grid.shape)

    def norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.components ** 2, axis=0))


def _values(field) -> np.ndarray:
    return np.asarray(field.values if isinstance(field, ScalarField) else field, dtype=float)


def interior_mask(grid: Grid, width: int = 1) -> np.ndarray:
    mask = np.zeros(grid.shape, dtype=bool)
    mask[(slice(width, -width),) * grid.dim] = True
    return mask


# -- discrete p-Dirichlet energy ------------------------------------------------

def _edge_diffs(u, grid):
    return [np.diff(u, axis=ax) / h for ax, h in enumerate(grid.h)]


def _corner_pairs(gx, gy):
    """Yield (b, a, gx_b, gy_a) for the four corner elements of every cell."""
    for b in (0, 1):
        gxb = gx[:, b:gx.shape[1] - 1 + b]
        for a in (0, 1):
            gya = gy[a:gy.shape[0] - 1 + a, :]
            yield b, a, gxb, gya


def dirichlet_energy(u, grid: Grid, p: float, epsilon: float = 0.0) -> float:
    """Sum over elements of ``weight * (|g|^2 + eps^2)^(p/2) / p``."""
    u = _values(u)
    eps2 = epsilon * epsilon
    if grid.dim == 1:
        (g,) = _edge_diffs(u, grid)
        return float(grid.h[0] * np.sum((g * g + eps2) ** (p / 2)) / p)
    gx, gy = _edge_diffs(u, grid)
    w = grid.cell_volume / 4
    total = 0.0
    for _, _, gxb, gya in _corner_pairs(gx, gy):
        total += np.sum((gxb * gxb + gya * gya + eps2) ** (p / 2))
    return float(w * total / p)


def power_change(base, delta, k) -> np.ndarray:
    """``(base + delta)^k - base^k`` without cancellation, for ``base >= 0``, ``base + delta >= 0``."""
    base = np.asarray(base, dtype=float)
    delta = np.asarray(delta, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        pos = base > 0
        safe = np.where(pos, base, 1.0)
        rel = np.where(pos, delta / safe, 0.0)
        out = np.where(pos, safe ** k * np.expm1(k * np.log1p(np.maximum(rel, -1.0))),
                       np.maximum(base + delta, 0.0) ** k)
    return np.where(delta == 0, 0.0, out)


def dirichlet_energy_change(u, v, grid: Grid, p: float, epsilon: float = 0.0) -> np.ndarray:
    """Per-element terms of ``dirichlet_energy(v) - dirichlet_energy(u)``, free of cancellation.

    Elements untouched by ``v - u`` contribute exact zeros, so a sum of the
    terms resolves changes far below the rounding level of the total energy.
    """
    u = _values(u)
    dv = _values(v) - u
    eps2 = epsilon * epsilon
    k = p / 2
    if grid.dim == 1:
        (g,) = _edge_diffs(u, grid)
        (dg,) = _edge_diffs(dv, grid)
        return grid.h[0] / p * power_change(g * g + eps2, dg * (2 * g + dg), k)
    gx, gy = _edge_diffs(u, grid)
    dgx, dgy = _edge_diffs(dv, grid)
    w = grid.cell_volume / 4
    parts = []
    for (_, _, gxb, gya), (_, _, dxb, dya) in zip(_corner_pairs(gx, gy), _corner_pairs(dgx, dgy)):
        s = gxb * gxb + gya * gya + eps2
        ds = dxb * (2 * gxb + dxb) + dya * (2 * gya + dya)
        parts.append((w / p * power_change(s, ds, k)).ravel())
    return np.concatenate(parts)


def dirichlet_energy_gradient(u, grid: Grid, p: float, epsilon: float = 0.0) -> np.ndarray:
    """Exact derivative of :func:`dirichlet_energy` with respect to nodal values."""
    u = _values(u)
    eps2 = epsilon * epsilon
    out = np.zeros_like(u)
    if grid.dim == 1:
        (g,) = _edge_diffs(u, grid)
        flux = (g * g + eps2) ** ((p - 2) / 2) * g
        out[1:] += flux
        out[:-1] -= flux
        return out
    gx, gy = _edge_diffs(u, grid)
    hx, hy = grid.h
    w = grid.cell_volume / 4
    fx = np.zeros_like(gx)
    fy = np.zeros_like(gy)
    for b, a, gxb, gya in _corner_pairs(gx, gy):
        coef = w * (gxb * gxb + gya * gya + eps2) ** ((p - 2) / 2)
        fx[:, b:fx.shape[1] - 1 + b] += coef * gxb
        fy[a:fy.shape[0] - 1 + a, :] += coef * gya
    out[1:, :] += fx / hx
    out[:-1, :] -= fx / hx
    out[:, 1:] += fy / hy
    out[:, :-1] -= fy / hy
    return out


def _ratio(a, s):
    # a / s with 0/0 = 0; |a| <= s wherever it is used
    return np.divide(a, s, out=np.zeros_like(a), where=s > 0)


def dirichlet_energy_hessian(u, grid: Grid, p: float, epsilon: float) -> sp.csr_matrix:
    """Sparse Hessian of :func:`dirichlet_energy` (nodes in C order).

    Element curvature is ``W (I + (p-2) g g^T / s)`` with ``s = |g|^2 + eps^2``
    and ``W = s^((p-2)/2)``; it is positive definite whenever ``eps > 0``.
    """
    u = _values(u)
    eps2 = epsilon * epsilon
    size = grid.size
    idx = np.arange(size).reshape(grid.shape)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(np.broadcast_to(v, r.shape).ravel())

    if grid.dim == 1:
        (g,) = _edge_diffs(u, grid)
        h = grid.h[0]
        s = g * g + eps2
        k = s ** ((p - 2) / 2) * (1 + (p - 2) * _ratio(g * g, s)) / h
        i0, i1 = idx[:-1], idx[1:]
        add(i0, i0, k)
        add(i1, i1, k)
        add(i0, i1, -k)
        add(i1, i0, -k)
    else:
        gx, gy = _edge_diffs(u, grid)
        hx, hy = grid.h
        w = grid.cell_volume / 4
        nx, ny = grid.shape
        for b, a, gxb, gya in _corner_pairs(gx, gy):
            s = gxb * gxb + gya * gya + eps2
            W = w * s ** ((p - 2) / 2)
            k11 = W * (1 + (p - 2) * _ratio(gxb * gxb, s)) / (hx * hx)
            k22 = W * (1 + (p - 2) * _ratio(gya * gya, s)) / (hy * hy)
            k12 = W * (p - 2) * _ratio(gxb * gya, s) / (hx * hy)
            xn = (idx[:-1, b:ny - 1 + b], idx[1:, b:ny - 1 + b])
            yn = (idx[a:nx - 1 + a, :-1], idx[a:nx - 1 + a, 1:])
            sgn = (-1.0, 1.0)
            for i in range(2):
                for j in range(2):
                    add(xn[i], xn[j], sgn[i] * sgn[j] * k11)
                    add(yn[i], yn[j], sgn[i] * sgn[j] * k22)
                    if p != 2:
                        add(xn[i], yn[j], sgn[i] * sgn[j] * k12)
                        add(yn[j], xn[i], sgn[i] * sgn[j] * k12)
    H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(size, size))
    return H.tocsr()


# -- pointwise operators ----------------------------------------------------------

def gradient(field: ScalarField, config: OperatorConfig = OperatorConfig()) -> VectorField:
    """Central differences inside, first-order one-sided differences on the boundary.

    With ``scheme="one-sided-fallback"`` a positive node whose central stencil
    reaches a zero node uses the one-sided difference away from that node, so
    the gradient is not smeared across a free boundary.
    """
    grid = field.grid
    u = field.values
    comps = []
    for ax, h in enumerate(grid.h):
        g = np.gradient(u, h, axis=ax, edge_order=1)
        if config.scheme == "one-sided-fallback":
            fwd = np.zeros_like(u)
            bwd = np.zeros_like(u)
            lo = [slice(None)] * grid.dim
            hi = [slice(None)] * grid.dim
            lo[ax], hi[ax] = slice(None, -1), slice(1, None)
            d = np.diff(u, axis=ax) / h
            fwd[tuple(lo)] = d
            bwd[tuple(hi)] = d
            nb_lo = np.ones_like(u, dtype=bool)
            nb_hi = np.ones_like(u, dtype=bool)
            zero = u <= 0
            nb_lo[tuple(hi)] = zero[tuple(lo)]   # left neighbour is zero
            nb_hi[tuple(lo)] = zero[tuple(hi)]   # right neighbour is zero
            inner = interior_mask(grid)
            pos = (u > 0) & inner
            g = np.where(pos & nb_lo & ~nb_hi, fwd, g)
            g = np.where(pos & nb_hi & ~nb_lo, bwd, g)
        comps.append(g)
    return VectorField(grid, np.stack(comps))


def p_laplacian(field: ScalarField, p: float, config: OperatorConfig = OperatorConfig()) -> ScalarField:
    """Divergence-form p-Laplacian at interior nodes (boundary layer set to 0)."""
    grid = field.grid
    d = -dirichlet_energy_gradient(field.values, grid, p, config.epsilon) / grid.cell_volume
    d[~interior_mask(grid)] = 0.0
    return ScalarField(grid, d)


def _second_derivatives(u, grid):
    """Standard second differences at interior nodes; cross term by the 4-corner stencil."""
    dim = grid.dim
    c = (slice(1, -1),) * dim
    if dim == 1:
        (h,) = grid.h
        return {"xx": (u[2:] - 2 * u[1:-1] + u[:-2]) / h ** 2}
    hx, hy = grid.h
    return {
        "xx": (u[2:, 1:-1] - 2 * u[c] + u[:-2, 1:-1]) / hx ** 2,
        "yy": (u[1:-1, 2:] - 2 * u[c] + u[1:-1, :-2]) / hy ** 2,
        "xy": (u[2:, 2:] - u[2:, :-2] - u[:-2, 2:] + u[:-2, :-2]) / (4 * hx * hy),
    }


def hessian_norm(field: ScalarField) -> ScalarField:
    """Frobenius norm of the discrete Hessian at interior nodes (boundary set to 0)."""
    grid = field.grid
    D = _second_derivatives(field.values, grid)
    if grid.dim == 1:
        inner = np.abs(D["xx"])
    else:
        inner = np.sqrt(D["xx"] ** 2 + D["yy"] ** 2 + 2 * D["xy"] ** 2)
    out = np.zeros(grid.shape)
    out[(slice(1, -1),) * grid.dim] = inner
    return ScalarField(grid, out)


def infinity_laplacian(field: ScalarField) -> ScalarField:
    """``grad u^T D^2 u grad u`` at interior nodes (boundary layer set to 0)."""
    grid = field.grid
    u = field.values
    c = (slice(1, -1),) * grid.dim
    D = _second_derivatives(u, grid)
    if grid.dim == 1:
        ux = (u[2:] - u[:-2]) / (2 * grid.h[0])
        inner = ux * ux * D["xx"]
    else:
        hx, hy = grid.h
        ux = (u[2:, 1:-1] - u[:-2, 1:-1]) / (2 * hx)
        uy = (u[1:-1, 2:] - u[1:-1, :-2]) / (2 * hy)
        inner = ux * ux * D["xx"] + 2 * ux * uy * D["xy"] + uy * uy * D["yy"]
    out = np.zeros(grid.shape)
    out[c] = inner
    return ScalarField(grid, out)


def p_laplacian_expanded(field: ScalarField, p: float, epsilon: float):
    """Non-divergence evaluation ``|Du|^(p-2) Lap u + (p-2) |Du|^(p-4) Inf-Lap u``.

    Only meaningful where the gradient is well resolved; returns the field and
    the mask of interior nodes with ``|Du| > 10 eps`` where it is valid.
    """
    grid = field.grid
    gnorm = gradient(field).norm()
    lap = np.zeros(grid.shape)
    D = _second_derivatives(field.values, grid)
    lap[(slice(1, -1),) * grid.dim] = D["xx"] + (D["yy"] if grid.dim == 2 else 0.0)
    inf = infinity_laplacian(field).values
    valid = interior_mask(grid) & (gnorm > 10 * epsilon) & (gnorm > 0)
    out = np.zeros(grid.shape)
    g = gnorm[valid]
    out[valid] = g ** (p - 2) * lap[valid] + (p - 2) * g ** (p - 4) * inf[valid]
    return ScalarField(grid, out), valid


def positive_power(u, ell) -> np.ndarray:
    """``u_+^ell`` with the convention ``0^0 = 0`` (indicator of ``{u > 0}``)."""
    u = np.asarray(u, dtype=float)
    pos = u > 0
    out = np.zeros_like(u)
    out[pos] = u[pos] ** ell
    return out


def limit_residual(field: ScalarField, ell: float) -> ScalarField:
    """Residual of ``max{-Inf-Lap u, -|Du| + u^ell}`` on ``{u > 0}``, ``-Inf-Lap u`` on ``{u = 0}``."""
    grid = field.grid
    u = field.values
    neg_inf = -infinity_laplacian(field).values
    first = -gradient(field).norm() + positive_power(u, ell)
    res = np.where(u > 0, np.maximum(neg_inf, first), neg_inf)
    res[~interior_mask(grid)] = 0.0
    return ScalarField(grid, res)
