"""Parameters, sharp exponents and the grid/field containers used everywhere else."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

ArrayLike = Union[float, np.ndarray]


class AdmissibilityError(ValueError):
    """Raised when (N, p, q, lambda0, ell) fall outside the dead-core regime."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Params:
    N: int
    p: float
    q: float
    lambda0: ArrayLike = 1.0
    ell: Optional[float] = None

    @property
    def lambda0_inf(self) -> float:
        return float(np.min(self.lambda0))

    @property
    def lambda0_sup(self) -> float:
        return float(np.max(self.lambda0))

    @property
    def constant_lambda0(self) -> bool:
        return np.ndim(self.lambda0) == 0

    def lambda0_field(self, shape) -> np.ndarray:
        """lambda0 broadcast to a nodal array of the given shape."""
        lam = np.asarray(self.lambda0, dtype=float)
        if lam.ndim and lam.shape != tuple(shape):
            raise ValueError(f"lambda0 field shape {lam.shape} does not match grid {tuple(shape)}")
        return np.broadcast_to(lam, tuple(shape))

    def with_(self, **changes) -> "Params":
        kw = dict(N=self.N, p=self.p, q=self.q, lambda0=self.lambda0, ell=self.ell)
        kw.update(changes)
        return make_params(**kw)

    def to_dict(self) -> dict:
        lam = float(self.lambda0) if self.constant_lambda0 else {
            "min": self.lambda0_inf, "max": self.lambda0_sup}
        return {"N": self.N, "p": self.p, "q": self.q, "lambda0": lam, "ell": self.ell}


def make_params(N, p, q, lambda0=1.0, ell=None) -> Params:
    """Validate and build :class:`Params`.

    The check ``q < p - 1`` is strict with no slack: at ``q = p - 1`` the
    absorption is no longer strong enough to produce a dead core.
    """
    if N not in (1, 2):
        raise AdmissibilityError(f"N must be 1 or 2, got {N!r}")
    p = float(p)
    q = float(q)
    if not np.isfinite(p) or p < 2:
        raise AdmissibilityError(f"p must be a finite real >= 2, got {p}")
    if not np.isfinite(q) or q < 0:
        raise AdmissibilityError(f"q must be >= 0, got {q}")
    if not q < p - 1:
        raise AdmissibilityError(f"q must satisfy q < p - 1 (got q={q}, p-1={p - 1})")
    lam = np.asarray(lambda0, dtype=float)
    if lam.size == 0 or not np.all(np.isfinite(lam)):
        raise AdmissibilityError("lambda0 must be finite")
    if np.any(lam <= 0):
        raise AdmissibilityError("lambda0 must be > 0 everywhere")
    lam = float(lam) if lam.ndim == 0 else _frozen(lam)
    if ell is not None:
        ell = float(ell)
        if not 0 <= ell < 1:
            raise AdmissibilityError(f"ell must lie in [0, 1), got {ell}")
    return Params(N=int(N), p=p, q=q, lambda0=lam, ell=ell)


@dataclass(frozen=True)
class Exponents:
    alpha: float
    grad_alpha: float
    hess_alpha: float
    gamma: Optional[float] = None


def exponents(params: Params) -> Exponents:
    p, q = params.p, params.q
    m = p - 1 - q
    gamma = None if params.ell is None else 1.0 / (1.0 - params.ell)
    return Exponents(alpha=p / m, grad_alpha=(1 + q) / m, hess_alpha=p * q / m, gamma=gamma)


def barrier_constant(N, lambda0, p, q) -> float:
    # [lambda0 m^p / (p^(p-1) (pq + N m))]^(1/m), m = p-1-q; evaluated in logs so large p does not overflow
    m = p - 1 - q
    log_c = (np.log(lambda0) + p * np.log(m) - (p - 1) * np.log(p) - np.log(p * q + N * m)) / m
    return float(np.exp(log_c))


def nondegeneracy_constant(params: Params) -> float:
    """Barrier constant of the strong non-degeneracy estimate, using inf lambda0."""
    return barrier_constant(params.N, params.lambda0_inf, params.p, params.q)


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform Cartesian grid; node arrays are indexed ``[ix]`` or ``[ix, iy]``."""

    dim: int
    origin: tuple
    extent: tuple
    n: tuple

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("grid dimension must be 1 or 2")
        for name in ("origin", "extent", "n"):
            if len(getattr(self, name)) != self.dim:
                raise ValueError(f"{name} must have {self.dim} entries")
        if any(k < 3 for k in self.n):
            raise ValueError("need at least 3 nodes per axis")
        if any(not e > 0 for e in self.extent):
            raise ValueError("extent must be positive")

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float], n) -> "Grid":
        lower = tuple(float(a) for a in np.atleast_1d(lower))
        upper = tuple(float(b) for b in np.atleast_1d(upper))
        dim = len(lower)
        n = (int(n),) * dim if np.ndim(n) == 0 else tuple(int(k) for k in n)
        return cls(dim, lower, tuple(b - a for a, b in zip(lower, upper)), n)

    @property
    def h(self) -> tuple:
        return tuple(e / (k - 1) for e, k in zip(self.extent, self.n))

    @property
    def hmin(self) -> float:
        return min(self.h)

    @property
    def shape(self) -> tuple:
        return tuple(self.n)

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def axes(self) -> list:
        return [o + h * np.arange(k) for o, h, k in zip(self.origin, self.h, self.n)]

    def coords(self) -> list:
        """Per-axis coordinate arrays broadcast to the node shape."""
        return list(np.meshgrid(*self.axes(), indexing="ij"))

    def points(self) -> np.ndarray:
        """(size, dim) array of node coordinates in C order."""
        return np.stack([c.ravel() for c in self.coords()], axis=1)

    def radius(self, center) -> np.ndarray:
        center = np.broadcast_to(np.asarray(center, dtype=float), (self.dim,))
        return np.sqrt(sum((c - x) ** 2 for c, x in zip(self.coords(), center)))

    @property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for ax in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[ax] = 0
            mask[tuple(idx)] = True
            idx[ax] = -1
            mask[tuple(idx)] = True
        return mask

    def distance_to_box(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = np.asarray(self.origin)
        hi = lo + np.asarray(self.extent)
        return np.minimum(x - lo, hi - x).min(axis=1)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "origin": list(self.origin), "extent": list(self.extent),
                "n": list(self.n)}


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "ScalarField":
        return cls(grid, fn(*grid.coords()))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True, eq=False)
class Solution:
    field: ScalarField
    params: Params
    boundary_data: ScalarField
    energy_trace: list
    residual_norm: float
    iterations: int
    converged: bool
    problem: object = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.field.grid

    @property
    def values(self) -> np.ndarray:
        return self.field.values
