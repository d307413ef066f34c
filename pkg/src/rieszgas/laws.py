"""Analytic reference laws and finite-N force-balance equilibria.

The semicircle of radius R (density 2/(pi R^2) sqrt(R^2 - x^2)) is the
large-N stationary profile of the quadratically confined log-gas; its radius
for confinement rate lambda is sqrt(2/lambda).  At finite N the zero-noise
stationary configuration solves the force balance

    lambda x_i = (1/N) sum_{j != i} 1/(x_i - x_j),

whose solutions are the roots of the degree-N physicists' Hermite polynomial
scaled by 1/sqrt(lambda N); here they are computed directly by a damped
Newton iteration, and the Hermite identity is kept as an independent check
in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .measures import EmpiricalMeasure


def semicircle_radius(lam: float) -> float:
    """Support radius sqrt(2/lambda) of the limiting stationary profile."""
    if not lam > 0.0:
        raise ValueError("lambda must be positive")
    return math.sqrt(2.0 / lam)


def semicircle_cdf(x, R: float):
    """CDF of the semicircle law of radius R; scalar or array x."""
    if not R > 0.0:
        raise ValueError("radius must be positive")
    y = np.clip(np.asarray(x, dtype=np.float64), -R, R)
    c = 0.5 + y * np.sqrt(R * R - y * y) / (math.pi * R * R) \
        + np.arcsin(y / R) / math.pi
    c = np.clip(c, 0.0, 1.0)
    return float(c) if np.isscalar(x) or np.ndim(x) == 0 else c


def _semicircle_quantile_array(u: np.ndarray, R: float) -> np.ndarray:
    # monotone bisection; 64 halvings put the bracket far below 1e-12 * R
    lo = np.full(u.shape, -R)
    hi = np.full(u.shape, R)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        below = semicircle_cdf(mid, R) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def semicircle_quantile(u, R: float):
    """Inverse CDF of the semicircle law; scalar or array u in (0,1)."""
    if not R > 0.0:
        raise ValueError("radius must be positive")
    ua = np.asarray(u, dtype=np.float64)
    if np.any(ua <= 0.0) or np.any(ua >= 1.0):
        raise ValueError("u must lie strictly inside (0,1)")
    q = _semicircle_quantile_array(np.atleast_1d(ua), R)
    return float(q[0]) if ua.ndim == 0 else q.reshape(ua.shape)


@dataclass(frozen=True)
class QuantileLaw:
    """A law seen through its quantile function, for W_2 comparisons.

    quantile maps arrays of u in (0,1) to positions, non-decreasing;
    second_moment is the analytic value of the descriptor where available.
    """

    descriptor: str
    quantile: Callable[[np.ndarray], np.ndarray]
    second_moment: float


def semicircle_law(R: float) -> QuantileLaw:
    if not R > 0.0:
        raise ValueError("radius must be positive")
    return QuantileLaw(
        descriptor=f"semicircle({R!r})",
        quantile=lambda u: semicircle_quantile(u, R),
        second_moment=R * R / 4.0,
    )


def uniform_law(a: float, b: float) -> QuantileLaw:
    if not b > a:
        raise ValueError("need b > a")
    return QuantileLaw(
        descriptor=f"uniform({a!r},{b!r})",
        quantile=lambda u: a + (b - a) * np.asarray(u, dtype=np.float64),
        second_moment=(a * a + a * b + b * b) / 3.0,
    )


def point_law(c: float) -> QuantileLaw:
    return QuantileLaw(
        descriptor=f"point({c!r})",
        quantile=lambda u: np.full(np.shape(u), float(c)),
        second_moment=float(c) * float(c),
    )


def empirical_law(mu: EmpiricalMeasure) -> QuantileLaw:
    """Wrap an empirical measure as a (staircase) quantile law."""
    atoms = mu.atoms
    n = atoms.size

    def q(u):
        idx = np.minimum((np.asarray(u) * n).astype(np.intp), n - 1)
        return atoms[idx]

    return QuantileLaw(descriptor="empirical-proxy", quantile=q,
                       second_moment=mu.second_moment())


@dataclass(frozen=True)
class EquilibriumConfig:
    """Strictly increasing stationary points plus the residual they achieve."""

    points: np.ndarray
    residual_norm: float
    iterations: int

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        p.flags.writeable = False
        object.__setattr__(self, "points", p)

    def to_csv(self) -> str:
        """One-column CSV of the points, header row, newline-terminated."""
        return "position\n" + "".join(f"{float(p)!r}\n" for p in self.points)


def _force_residual(x: np.ndarray, lam: float) -> np.ndarray:
    n = x.size
    d = x[:, None] - x[None, :]
    np.fill_diagonal(d, np.inf)
    return lam * x - np.sum(1.0 / d, axis=1) / n


def equilibrium_points(N: int, lam: float = 1.0, *, tol: float = 1e-10,
                       max_iter: int = 200) -> EquilibriumConfig:
    """Solve the force balance lambda*x_i = (1/N) sum_{j!=i} 1/(x_i-x_j).

    Damped Newton from a uniform grid spanning the limiting support; steps
    that would break the strict ordering are halved (factor 0.5) until they
    do not.  The Jacobian is lambda*I plus a weighted graph Laplacian, hence
    positive definite, so the solve never degenerates.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if not lam > 0.0:
        raise ValueError("lambda must be positive")
    if N == 1:
        return EquilibriumConfig(np.zeros(1), 0.0, 0)
    R = semicircle_radius(lam)
    x = np.linspace(-R * (1 - 0.5 / N), R * (1 - 0.5 / N), N)
    for it in range(1, max_iter + 1):
        d = x[:, None] - x[None, :]
        np.fill_diagonal(d, np.inf)
        inv = 1.0 / d
        F = lam * x - inv.sum(axis=1) / N
        res = float(np.max(np.abs(F)))
        if res <= tol:
            return EquilibriumConfig(x, res, it - 1)
        s = inv * inv                      # 1/(x_i-x_j)^2
        J = -s / N
        np.fill_diagonal(J, lam + s.sum(axis=1) / N)
        step = np.linalg.solve(J, F)
        cand = x - step
        shrink = 0
        while np.any(np.diff(cand) <= 0.0):
            step *= 0.5
            cand = x - step
            shrink += 1
            if shrink > 60:
                raise RuntimeError(
                    f"equilibrium Newton stalled at iteration {it}, "
                    f"residual {res:.3e}")
        x = cand
    res = float(np.max(np.abs(_force_residual(x, lam))))
    raise RuntimeError(
        f"equilibrium Newton did not converge in {max_iter} iterations; "
        f"final residual {res:.3e} (tol {tol:.1e})")
