"""Dead cores, free boundaries and the quantitative estimates measured near them.

All measurements are read-only over a finished field. A "point" is a
free-boundary node; balls are closed node balls ``|x - x0| <= r``. The sup over
a closed ball dominates the sup over its sphere, so non-degeneracy ratios are
measured conservatively in the direction that can only make them pass more
easily; this is recorded in every non-degeneracy result.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial import cKDTree

from .core import Grid, Params, ScalarField, Solution, exponents, nondegeneracy_constant
from .pde_ops import gradient, hessian_norm

TOL_FB = 0.15
_EDGE = 1e-9  # slack when testing |x - x0| <= r on node coordinates


class FitError(ValueError):
    """Raised when an exponent fit has fewer than three usable (r, value) pairs."""


@dataclass(frozen=True, eq=False)
class NodeSet:
    grid: Grid
    indices: np.ndarray  # flat (C-order) node indices
    flags: tuple = ()

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= self.grid.size):
            raise ValueError("node index out of range")
        if np.unique(idx).size != idx.size:
            raise ValueError("node indices must be unique")
        idx = np.sort(idx)
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_mask(cls, grid: Grid, mask, flags=()) -> "NodeSet":
        return cls(grid, np.flatnonzero(np.asarray(mask, dtype=bool).ravel()), tuple(flags))

    def __len__(self):
        return int(self.indices.size)

    @property
    def empty(self) -> bool:
        return self.indices.size == 0

    def mask(self) -> np.ndarray:
        m = np.zeros(self.grid.size, dtype=bool)
        m[self.indices] = True
        return m.reshape(self.grid.shape)

    def points(self) -> np.ndarray:
        return self.grid.points()[self.indices]


@dataclass(frozen=True)
class BallStats:
    center: tuple
    radii: np.ndarray
    sup_values: np.ndarray
    inf_values: np.ndarray
    grad_sup_values: np.ndarray
    hessian_l2_values: np.ndarray


@dataclass
class CheckResult:
    """One measured claim: its values, the target it is compared with, and the verdict."""

    claim: str
    target: str
    passed: bool
    values: dict = field(default_factory=dict)
    vacuous: bool = False
    notes: list = field(default_factory=list)

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        return {"claim": self.claim, "target": self.target, "status": self.status,
                "vacuous": self.vacuous, "values": _plain(self.values), "notes": list(self.notes)}


def _plain(obj):
    """Recursively convert numpy scalars/arrays to JSON-ready Python values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class FreeBoundaryReport:
    dead_core: NodeSet
    fb_nodes: NodeSet
    alpha_hat: list
    grad_alpha_hat: list
    hess_alpha_hat: list
    min_nondeg_ratio: Optional[float]
    density_ratios: list
    porosity_ratios: list
    harnack_ratios: list
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return _plain({
            "dead_core_nodes": len(self.dead_core), "fb_nodes": len(self.fb_nodes),
            "flags": list(self.dead_core.flags + self.fb_nodes.flags),
            "alpha_hat": self.alpha_hat, "grad_alpha_hat": self.grad_alpha_hat,
            "hess_alpha_hat": self.hess_alpha_hat, "min_nondeg_ratio": self.min_nondeg_ratio,
            "density_ratios": self.density_ratios, "porosity_ratios": self.porosity_ratios,
            "harnack_ratios": self.harnack_ratios,
            "checks": [c.to_dict() for c in self.checks]})


# -- plumbing -----------------------------------------------------------------

def _unpack(obj, params: Optional[Params] = None):
    """(field, params, problem) from a Solution or a bare ScalarField."""
    if isinstance(obj, Solution):
        return obj.field, params or obj.params, obj.problem
    if isinstance(obj, ScalarField):
        return obj, params, None
    raise TypeError("expected a Solution or ScalarField")


def _domain_distance(grid: Grid, problem, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if problem is not None:
        return problem.distance_to_boundary(x)
    return grid.distance_to_box(x)


def _alpha(params: Optional[Params]) -> float:
    if params is None:
        raise ValueError("parameters are needed (pass a Solution or params=)")
    return exponents(params).alpha


def default_delta(params: Params, grid: Grid) -> float:
    """Threshold ``h^alpha`` separating numerical zero from the positivity set."""
    return grid.hmin ** _alpha(params)


def default_radii(grid: Grid, x0, problem=None, K: int = 5) -> np.ndarray:
    """``r_max / 2^k`` for ``k = 0..K`` with ``r_max`` a quarter of the distance to the boundary.

    Radii below four grid spacings are dropped.
    """
    d = float(_domain_distance(grid, problem, x0)[0])
    r = d / 4 / 2.0 ** np.arange(K + 1)
    return r[r >= 4 * grid.hmin - 1e-12]


def select_points(fb: NodeSet, max_points: Optional[int] = 64) -> np.ndarray:
    """Evenly spaced (deterministic) subset of the free-boundary node coordinates."""
    pts = fb.points()
    if max_points is None or len(pts) <= max_points:
        return pts
    take = np.linspace(0, len(pts) - 1, max_points).round().astype(int)
    return pts[np.unique(take)]


# -- sets -----------------------------------------------------------------------

def extract_sets(solution, delta_h: Optional[float] = None, params: Optional[Params] = None):
    """Dead core ``{u <= delta_h}`` and the positive nodes 4-adjacent to it.

    ``delta_h`` defaults to ``h^alpha``. An empty positivity set returns both
    sets with the flag ``"all dead"``.
    """
    fld, params, _ = _unpack(solution, params)
    grid = fld.grid
    if delta_h is None:
        delta_h = default_delta(params, grid)
    if not delta_h > 0:
        raise ValueError("delta_h must be positive")
    u = fld.values
    dead = u <= delta_h
    near = np.zeros_like(dead)
    for ax in range(grid.dim):
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        lo[ax], hi[ax] = slice(None, -1), slice(1, None)
        near[tuple(lo)] |= dead[tuple(hi)]
        near[tuple(hi)] |= dead[tuple(lo)]
    fb = ~dead & near
    flags = ("all dead",) if dead.all() else ()
    return NodeSet.from_mask(grid, dead, flags), NodeSet.from_mask(grid, fb, flags)


def hausdorff(set_a, set_b) -> float:
    """Hausdorff distance between two point sets (NodeSets or coordinate arrays)."""
    a = set_a.points() if isinstance(set_a, NodeSet) else np.atleast_2d(np.asarray(set_a, float))
    b = set_b.points() if isinstance(set_b, NodeSet) else np.atleast_2d(np.asarray(set_b, float))
    if a.size == 0 or b.size == 0:
        raise ValueError("undefined Hausdorff distance: empty set")
    if a.shape[1] != b.shape[1]:
        a, b = a.reshape(-1, 1), b.reshape(-1, 1)
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba))


def distance_to_set(grid: Grid, nodes: NodeSet) -> np.ndarray:
    """Exact Euclidean distance from every node to the nearest member of ``nodes``."""
    if nodes.empty:
        return np.full(grid.shape, np.inf)
    d = cKDTree(nodes.points()).query(grid.points())[0]
    return d.reshape(grid.shape)


# -- ball statistics ----------------------------------------------------------

def _ball_measure(dim, r):
    return 2 * r if dim == 1 else np.pi * r * r


def ball_stats(solution, x0, radii=None, params: Optional[Params] = None) -> BallStats:
    """Closed-ball sup/inf, gradient sup and the weighted Hessian L2-average around ``x0``.

    The Hessian quantity is ``(avg_B (|grad u|^(p-2) |D^2 u|)^2)^(1/2)`` with
    nodal midpoint quadrature normalized by the ball measure; it needs ``p``.
    """
    fld, params, problem = _unpack(solution, params)
    grid = fld.grid
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if radii is None:
        radii = default_radii(grid, x0, problem)
    radii = np.asarray(radii, dtype=float)
    if radii.size == 0:
        raise ValueError("no radii to evaluate")
    if np.any(radii <= 0):
        raise ValueError("radii must be positive")
    reach = float(_domain_distance(grid, problem, x0)[0])
    if radii.max() > reach + 1e-12:
        raise ValueError(f"ball of radius {radii.max():.4g} leaves the domain (distance {reach:.4g})")
    gn = gradient(fld).norm()
    hq = None
    if params is not None:
        hq = (gn ** (params.p - 2) * hessian_norm(fld).values) ** 2
    r = grid.radius(x0)
    u = fld.values
    sup, inf, gsup, hl2 = [], [], [], []
    for rk in radii:
        ball = r <= rk + _EDGE * max(1.0, rk)
        sup.append(u[ball].max())
        inf.append(u[ball].min())
        gsup.append(gn[ball].max())
        if hq is None:
            hl2.append(np.nan)
        else:
            hl2.append(np.sqrt(hq[ball].sum() * grid.cell_volume / _ball_measure(grid.dim, rk)))
    return BallStats(tuple(x0), radii, np.array(sup), np.array(inf), np.array(gsup), np.array(hl2))


def fit_exponent(radii, values) -> float:
    """Least-squares slope of ``log(value)`` against ``log(r)``; nonpositive pairs are dropped."""
    r = np.asarray(radii, dtype=float).ravel()
    v = np.asarray(values, dtype=float).ravel()
    if r.shape != v.shape:
        raise ValueError("radii and values differ in length")
    keep = (r > 0) & (v > 0) & np.isfinite(v)
    if keep.sum() < 3:
        raise FitError(f"exponent fit needs >= 3 positive pairs, have {int(keep.sum())} of {r.size}")
    return float(np.polyfit(np.log(r[keep]), np.log(v[keep]), 1)[0])


def _points_and_sets(solution, points, delta_h, params, max_points):
    fld, params, problem = _unpack(solution, params)
    dead, fb = extract_sets(solution, delta_h, params)
    if points is None:
        points = select_points(fb, max_points)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != fld.grid.dim:
        points = points.reshape(-1, fld.grid.dim)
    return fld, params, problem, dead, fb, points


def _stats_per_point(solution, points, radii, params):
    out = []
    for x0 in points:
        rr = radii if radii is not None else None
        out.append(ball_stats(solution, x0, rr, params))
    return out


# -- checks ---------------------------------------------------------------------

_SPHERE_NOTE = "sup taken over the closed node ball, which dominates the sup over the sphere"


def check_nondegeneracy(solution, points=None, radii=None, tol_fb: float = TOL_FB,
                        delta_h=None, params=None, max_points=64) -> CheckResult:
    """Ratios ``S_r / (c0 r^alpha)`` at free-boundary points; PASS iff the minimum is ``>= 1 - tol_fb``."""
    fld, params, _, _, fb, points = _points_and_sets(solution, points, delta_h, params, max_points)
    claim, target = "strong non-degeneracy", f"min S_r/(c0 r^alpha) >= {1 - tol_fb:g}"
    if len(points) == 0:
        return CheckResult(claim, target, True, {"min_ratio": None}, vacuous=True,
                           notes=["no free-boundary points"])
    c0 = nondegeneracy_constant(params)
    a = _alpha(params)
    per_point = []
    for st in _stats_per_point(solution, points, radii, params):
        per_point.append(st.sup_values / (c0 * st.radii ** a))
    mins = [float(np.min(x)) for x in per_point]
    m = min(mins)
    return CheckResult(claim, target, m >= 1 - tol_fb,
                       {"c0": c0, "alpha": a, "min_ratio": m, "per_point_min": mins},
                       notes=[_SPHERE_NOTE])


def _growth_measures(solution, points, radii, delta_h, params, max_points):
    fld, params, problem, dead, fb, points = _points_and_sets(solution, points, delta_h, params,
                                                              max_points)
    if len(points) == 0:
        return None
    a = _alpha(params)
    grid = fld.grid
    u = fld.values
    unorm = float(np.max(np.abs(u)))
    stats = _stats_per_point(solution, points, radii, params)
    c1 = max(float(np.max(st.sup_values / (unorm * st.radii ** a))) for st in stats)
    r_max = max(float(st.radii.max()) for st in stats)
    dist = distance_to_set(grid, fb)
    band = (u > 0) & ~dead.mask() & (dist >= 4 * grid.hmin - 1e-12) & (dist <= r_max + 1e-12)
    if problem is not None:
        band &= problem.free_mask
    if band.any():
        q = u[band] / dist[band] ** a
        lo, hi = float(q.min()), float(q.max())
    else:
        lo = hi = float("nan")
    slopes = []
    for st in stats:
        try:
            slopes.append(fit_exponent(st.radii, st.sup_values))
        except FitError:
            slopes.append(float("nan"))
    return dict(c1_hat=c1, sandwich_low=lo, sandwich_high=hi, alpha=a, alpha_hat=slopes)


def check_growth(solution, other=None, points=None, radii=None, delta_h=None, params=None,
                 max_points=64, max_growth: float = 0.10) -> CheckResult:
    """Upper growth constant and the ``u / dist^alpha`` sandwich, compared across resolutions.

    ``other`` is the same problem on a coarser (or finer) grid; PASS iff neither
    ``c1_hat`` nor the sandwich upper constant grows by more than ``max_growth``
    from the coarser to the finer run. Without ``other`` the check cannot pass.
    """
    claim = "improved regularity along the free boundary"
    target = f"c1_hat and u/dist^alpha bounded; growth under refinement <= {max_growth:.0%}"
    m = _growth_measures(solution, points, radii, delta_h, params, max_points)
    if m is None:
        return CheckResult(claim, target, True, {}, vacuous=True, notes=["no free-boundary points"])
    values = dict(m)
    if other is None:
        return CheckResult(claim, target, False, values, notes=["no second resolution supplied"])
    m2 = _growth_measures(other, None, None, delta_h, params, max_points)
    if m2 is None:
        return CheckResult(claim, target, False, values, notes=["second resolution has no free boundary"])
    h1 = _unpack(solution, params)[0].grid.hmin
    h2 = _unpack(other, params)[0].grid.hmin
    fine, coarse = (m, m2) if h1 < h2 else (m2, m)
    g1 = fine["c1_hat"] / coarse["c1_hat"] - 1
    g2 = fine["sandwich_high"] / coarse["sandwich_high"] - 1
    values.update(other=m2, c1_growth=g1, sandwich_growth=g2)
    ok = bool(g1 <= max_growth and g2 <= max_growth and np.isfinite(g2))
    return CheckResult(claim, target, ok, values)


def check_gradient_growth(solution, points=None, radii=None, delta_h=None, params=None,
                          max_points=64) -> CheckResult:
    """Fitted exponent of ``sup_B |grad u|``; PASS iff every fit is ``>= 0.85 (1+q)/(p-1-q)``."""
    fld, params, _, _, _, points = _points_and_sets(solution, points, delta_h, params, max_points)
    tgt = exponents(params).grad_alpha
    claim, target = "gradient growth near the free boundary", f"slope >= {0.85 * tgt:.6g}"
    if len(points) == 0:
        return CheckResult(claim, target, True, {}, vacuous=True, notes=["no free-boundary points"])
    slopes = [fit_exponent(st.radii, st.grad_sup_values)
              for st in _stats_per_point(solution, points, radii, params)]
    return CheckResult(claim, target, min(slopes) >= 0.85 * tgt,
                       {"target_exponent": tgt, "grad_alpha_hat": slopes})


def check_hessian_l2(solution, points=None, radii=None, delta_h=None, params=None,
                     max_points=64) -> CheckResult:
    """Fitted exponent of the weighted Hessian L2-average; needs ``p > 2``."""
    fld, params, _, _, _, points = _points_and_sets(solution, points, delta_h, params, max_points)
    if params.p <= 2:
        raise ValueError("Hessian L2-average estimate requires p > 2")
    tgt = exponents(params).hess_alpha
    claim, target = "L2-average Hessian decay", f"slope >= {0.8 * tgt:.6g}"
    if len(points) == 0:
        return CheckResult(claim, target, True, {}, vacuous=True, notes=["no free-boundary points"])
    stats = _stats_per_point(solution, points, radii, params)
    if tgt == 0:
        vals = [float(np.max(st.hessian_l2_values)) for st in stats]
        return CheckResult(claim, target, bool(np.all(np.isfinite(vals))),
                           {"target_exponent": 0.0, "max_value": vals})
    slopes = [fit_exponent(st.radii, st.hessian_l2_values) for st in stats]
    return CheckResult(claim, target, min(slopes) >= 0.8 * tgt,
                       {"target_exponent": tgt, "hess_alpha_hat": slopes})


def density_porosity(solution, rhos=None, points=None, theta_min: float = 0.2, delta_h=None,
                     params=None, max_points=64) -> CheckResult:
    """Positive-set density, porosity of the free boundary and the small-value band measure.

    * density: fraction of nodes of ``B_rho(x0)`` with ``u > delta_h``; must be ``>= theta_min``;
    * porosity: radius of the largest node ball inside ``B_rho(x0)`` free of free-boundary
      nodes, divided by ``rho``;
    * band: measure of ``{0 < u < rho^alpha}`` over interior nodes divided by ``rho``; PASS
      needs it not to exceed twice its value at the largest ``rho``.
    """
    fld, params, problem, dead, fb, points = _points_and_sets(solution, points, delta_h, params,
                                                              max_points)
    grid = fld.grid
    u = fld.values
    claim = "positive density, porosity and measure band"
    target = f"density >= {theta_min:g}; porosity > 0; band/rho bounded"
    if len(points) == 0:
        return CheckResult(claim, target, True, {"density_min": 1.0}, vacuous=True,
                           notes=["no free-boundary points; positivity set has full density"])
    a = _alpha(params)
    pos = ~dead.mask()
    # distance to the nearest free-boundary node on the node lattice (exact for node balls)
    d_fb = distance_transform_edt(~fb.mask(), sampling=grid.h)
    interior = problem.free_mask if problem is not None else ~grid.boundary_mask
    dens, poro = [], []
    rho_used = None
    for x0 in points:
        rr = default_radii(grid, x0, problem) if rhos is None else np.asarray(rhos, float)
        rho_used = rr if rho_used is None or len(rr) < len(rho_used) else rho_used
        r = grid.radius(x0)
        dp, pp = [], []
        for rho in rr:
            ball = r <= rho + _EDGE
            dp.append(float(pos[ball].mean()))
            hole = np.minimum(d_fb[ball], rho - r[ball])
            pp.append(float(hole.max() / rho))
        dens.append(dp)
        poro.append(pp)
    band = []
    for rho in rho_used:
        cnt = np.count_nonzero(interior & (u > 0) & (u < rho ** a))
        band.append(cnt * grid.cell_volume / rho)
    dmin = min(min(x) for x in dens)
    pmin = min(min(x) for x in poro)
    band_ok = bool(band) and max(band) <= 2 * band[0] + 1e-300
    return CheckResult(claim, target, bool(dmin >= theta_min and pmin > 0 and band_ok),
                       {"rho": rho_used, "density": dens, "porosity": poro, "band": band,
                        "density_min": dmin, "porosity_min": pmin})


def harnack_ratio(solution, points, other=None, delta_h=None, params=None,
                  max_growth: float = 0.10) -> CheckResult:
    """``sup_{B_(d/2)} u / max(d/2, inf_{B_(d/2)} u)`` with ``d`` the distance to the free boundary.

    Points with ``d`` above half the domain inradius are rejected. With
    ``other`` (a second resolution) PASS needs the maximum ratio to grow by at
    most ``max_growth`` on the finer grid; without it, PASS needs finite ratios.
    """
    claim, target = "Harnack inequality near the free boundary", "ratio bounded, stable under refinement"

    def ratios(sol):
        fld, prm, problem = _unpack(sol, params)
        grid = fld.grid
        _, fb = extract_sets(sol, delta_h, prm)
        if fb.empty:
            return None
        tree = cKDTree(fb.points())
        free = problem.free_mask if problem is not None else ~grid.boundary_mask
        inrad = float(_domain_distance(grid, problem, grid.points()[free.ravel()]).max())
        out = []
        for x0 in np.atleast_2d(np.asarray(points, float)).reshape(-1, grid.dim):
            d = float(tree.query(x0)[0])
            if d > inrad / 2 + 1e-12:
                raise ValueError(f"point {x0} is {d:.4g} from the free boundary, above half the inradius")
            ball = grid.radius(x0) <= d / 2 + _EDGE
            vals = fld.values[ball]
            out.append(float(vals.max() / max(d / 2, vals.min())))
        return out

    r1 = ratios(solution)
    if r1 is None:
        return CheckResult(claim, target, True, {}, vacuous=True, notes=["no free-boundary points"])
    values = {"ratios": r1}
    if other is None:
        return CheckResult(claim, target, bool(np.all(np.isfinite(r1))), values)
    r2 = ratios(other)
    h1 = _unpack(solution, params)[0].grid.hmin
    h2 = _unpack(other, params)[0].grid.hmin
    fine, coarse = (r1, r2) if h1 < h2 else (r2, r1)
    growth = max(fine) / max(coarse) - 1
    values.update(other=r2, growth=growth)
    return CheckResult(claim, target, bool(growth <= max_growth), values)


def analyze(solution, other=None, tol_fb: float = TOL_FB, delta_h=None, params=None,
            max_points=64, harnack_points=None) -> FreeBoundaryReport:
    """Run every free-boundary measurement on one solution."""
    fld, params, problem = _unpack(solution, params)
    dead, fb = extract_sets(solution, delta_h, params)
    checks = []
    nondeg = check_nondegeneracy(solution, tol_fb=tol_fb, delta_h=delta_h, params=params,
                                 max_points=max_points)
    checks.append(nondeg)
    alpha_hat, grad_hat, hess_hat = [], [], []
    if not fb.empty and _has_fit_radii(solution, fb, params, max_points):
        growth = check_growth(solution, other, delta_h=delta_h, params=params, max_points=max_points)
        checks.append(growth)
        alpha_hat = growth.values.get("alpha_hat", [])
        grad = check_gradient_growth(solution, delta_h=delta_h, params=params, max_points=max_points)
        checks.append(grad)
        grad_hat = grad.values.get("grad_alpha_hat", [])
        if params.p > 2:
            hess = check_hessian_l2(solution, delta_h=delta_h, params=params, max_points=max_points)
            checks.append(hess)
            hess_hat = hess.values.get("hess_alpha_hat", [])
    dp = density_porosity(solution, delta_h=delta_h, params=params, max_points=max_points)
    checks.append(dp)
    harn = []
    if harnack_points is not None:
        hr = harnack_ratio(solution, harnack_points, other, delta_h=delta_h, params=params)
        checks.append(hr)
        harn = hr.values.get("ratios", [])
    return FreeBoundaryReport(
        dead_core=dead, fb_nodes=fb, alpha_hat=alpha_hat, grad_alpha_hat=grad_hat,
        hess_alpha_hat=hess_hat, min_nondeg_ratio=nondeg.values.get("min_ratio"),
        density_ratios=dp.values.get("density", []), porosity_ratios=dp.values.get("porosity", []),
        harnack_ratios=harn, checks=checks)


def _has_fit_radii(solution, fb, params, max_points) -> bool:
    fld, _, problem = _unpack(solution, params)
    pts = select_points(fb, max_points)
    return all(len(default_radii(fld.grid, x0, problem)) >= 3 for x0 in pts)
