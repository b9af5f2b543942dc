"""Closed-form profiles used as ground truth.

Radial dead-core solutions for finite p, their p -> infinity limit, and two
explicit viscosity solutions of the limit equation (Aronsson's function and a
polar-angle example). Derivatives are hand-coded; there is no symbolic layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Params, barrier_constant, make_params


def theta(N, lambda0, p, q) -> float:
    """Amplitude of the radial profile ``theta * (|x - x0| - r0)_+^(p/(p-1-q))``."""
    make_params(N, p, q, lambda0)  # admissibility gate
    return barrier_constant(N, float(lambda0), p, q)


def _radius(x, x0):
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x0.size == 1:
        return np.abs(x - x0.item())
    return np.linalg.norm(x - x0, axis=-1)


@dataclass(frozen=True, eq=False)
class RadialOracle:
    params: Params
    R: float
    kappa: float
    x0: tuple
    theta: float
    T: float
    r0: float

    @property
    def alpha(self) -> float:
        p, q = self.params.p, self.params.q
        return p / (p - 1 - q)

    def __call__(self, x):
        return radial_value(self, x)

    def on_grid(self, grid) -> np.ndarray:
        r = grid.radius(self.x0)
        return self.theta * np.clip(r - self.r0, 0, None) ** self.alpha


def radial_oracle(params: Params, R, kappa, x0=None) -> RadialOracle:
    """Build the radial dead-core profile on ``B_R(x0)`` with boundary value ``kappa``.

    Raises ``ValueError`` when the compatibility condition ``R > T`` fails, in
    which case no dead core forms and the profile is not the solution.
    """
    if not params.constant_lambda0:
        raise ValueError("radial oracle needs a constant lambda0")
    if R <= 0 or kappa <= 0:
        raise ValueError("R and kappa must be positive")
    x0 = tuple(np.zeros(params.N)) if x0 is None else tuple(np.atleast_1d(np.asarray(x0, float)))
    p, q = params.p, params.q
    th = theta(params.N, params.lambda0, p, q)
    T = (kappa / th) ** ((p - 1 - q) / p)
    if not R > T:
        raise ValueError(f"compatibility condition R > T fails (R={R}, T={T:.6g}); no dead core")
    return RadialOracle(params, float(R), float(kappa), x0, th, T, float(R - T))


def radial_value(oracle: RadialOracle, x):
    r = _radius(x, oracle.x0)
    return oracle.theta * np.clip(r - oracle.r0, 0, None) ** oracle.alpha


def radial_ode_residual(oracle: RadialOracle, t_samples) -> float:
    """Max of ``|Delta_p v - lambda0 v^q|`` for the radial profile at radii ``t_samples``.

    Uses ``Delta_p v = (|v'|^(p-2) v')' + (N-1)/r |v'|^(p-2) v'`` with the
    closed-form derivatives of ``theta * d^alpha``, ``d = r - r0``. The profile
    is an exact solution only in 1D or when ``r0 = 0``; other cases are refused.
    """
    N = oracle.params.N
    if N >= 2 and oracle.r0 > 0:
        raise ValueError(
            "radial profile is not an exact solution for N >= 2 with r0 > 0; "
            "use the solver as the reference instead")
    p, q, lam = oracle.params.p, oracle.params.q, oracle.params.lambda0
    a, th = oracle.alpha, oracle.theta
    r = np.abs(np.asarray(t_samples, dtype=float))
    d = np.clip(r - oracle.r0, 0, None)
    # |v'|^(p-2) v' = (th a)^(p-1) d^((a-1)(p-1)) and (a-1)(p-1) = q a + 1
    flux = (th * a) ** (p - 1) * d ** (q * a + 1)
    dflux = (th * a) ** (p - 1) * (q * a + 1) * d ** (q * a)
    lap = dflux.copy()
    if N >= 2:
        with np.errstate(divide="ignore", invalid="ignore"):
            lap += np.where(r > 0, (N - 1) * flux / np.where(r > 0, r, 1), 0.0)
    react = lam * np.where(d > 0, (th * d ** a) ** q, 0.0)
    return float(np.max(np.abs(lap - react)))


@dataclass(frozen=True)
class LimitRadialOracle:
    ell: float
    R: float
    kappa: float
    x0: tuple
    r0_ell: float

    @property
    def gamma(self) -> float:
        return 1.0 / (1.0 - self.ell)

    @property
    def amplitude(self) -> float:
        return (1.0 - self.ell) ** self.gamma

    def __call__(self, x):
        return limit_radial_value(self, x)

    def on_grid(self, grid) -> np.ndarray:
        r = grid.radius(self.x0)
        return self.amplitude * np.clip(r - self.r0_ell, 0, None) ** self.gamma


def limit_radial_oracle(ell, R, kappa=1.0, x0=0.0, N=1) -> LimitRadialOracle:
    """Limit profile; the dead-core radius ``R - kappa^(1-ell)/(1-ell)`` reproduces ``kappa`` at ``|x - x0| = R``."""
    if not 0 <= ell < 1:
        raise ValueError("ell must lie in [0, 1)")
    x0 = tuple(np.broadcast_to(np.asarray(x0, float), (N,)))
    r0 = R - kappa ** (1 - ell) / (1 - ell)
    return LimitRadialOracle(float(ell), float(R), float(kappa), x0, float(r0))


def limit_radial_value(oracle: LimitRadialOracle, x):
    r = _radius(x, oracle.x0)
    return oracle.amplitude * np.clip(r - oracle.r0_ell, 0, None) ** oracle.gamma


def limit_radial_slope(oracle: LimitRadialOracle, r):
    """Radial derivative of the limit profile; equals ``profile**ell`` on the positive set."""
    d = np.clip(np.asarray(r, float) - oracle.r0_ell, 0, None)
    return oracle.amplitude * oracle.gamma * d ** (oracle.gamma - 1)


def limit_infinity_laplacian(oracle: LimitRadialOracle, r):
    """Closed-form infinity-Laplacian of the limit profile (radial direction only), ``>= 0``."""
    g, ell = oracle.gamma, oracle.ell
    d = np.clip(np.asarray(r, float) - oracle.r0_ell, 0, None)
    c = oracle.amplitude * g
    with np.errstate(divide="ignore"):
        return np.where(d > 0, c ** 3 * ell * g * d ** ((4 * ell - 1) * g), 0.0)


def aronsson(x, y):
    """Aronsson's function ``(x^(4/3) - y^(4/3))_+`` with its closed-form gradient norm.

    ``ell_check = |grad| - value^(1/4)`` is nonnegative on ``B_1(sqrt2, sqrt2)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    value = np.clip(x ** (4 / 3) - y ** (4 / 3), 0, None)
    gnorm = (4 / 3) * np.sqrt(x ** (2 / 3) + y ** (2 / 3))
    return value, gnorm, gnorm - value ** 0.25


def arctan_example(x, y, ell):
    """``arctan(y/x)_+`` on ``B_(1/10)(1/5, 0)``; returns value, ``|grad|`` and ``|grad| - value^ell``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0):
        raise ValueError("arctan example requires x > 0")
    value = np.clip(np.arctan(y / x), 0, None)
    gnorm = 1.0 / np.sqrt(x * x + y * y)
    return value, gnorm, gnorm - value ** ell


def sample_ball(center, radius, n, rng=None) -> np.ndarray:
    """``n`` points uniform in the open 2D disk ``B_radius(center)``."""
    rng = np.random.default_rng(rng)
    r = radius * np.sqrt(rng.uniform(0, 1, n)) * (1 - 1e-12)
    t = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([center[0] + r * np.cos(t), center[1] + r * np.sin(t)])
