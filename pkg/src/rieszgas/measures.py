"""Empirical measures and exact one-dimensional Wasserstein distances.

In one dimension the optimal W_p coupling of two equal-weight atomic
measures is the monotone (sorted) pairing, so every distance here reduces to
quantile arithmetic.  Unequal sizes are handled by sweeping the merged
quantile breakpoints {k/N} u {k/M}, which integrates the two piecewise
constant quantile functions exactly without materializing a common
refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Equal-weight atoms, sorted non-decreasing. Ties are allowed."""

    atoms: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=np.float64)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("empty measure")
        if not np.all(np.isfinite(a)):
            raise ValueError("measure atoms must be finite")
        if np.any(a[1:] < a[:-1]):
            raise ValueError("atoms must be sorted non-decreasing")
        a = a.copy()
        a.flags.writeable = False
        object.__setattr__(self, "atoms", a)

    @property
    def n(self) -> int:
        return self.atoms.size

    def second_moment(self) -> float:
        return float(np.mean(self.atoms * self.atoms))

    def tolist(self) -> list:
        """Atoms as a flat list of floats (the JSON form)."""
        return [float(a) for a in self.atoms]

    def to_csv(self) -> str:
        """One-column CSV of the atoms, header row, newline-terminated."""
        return "position\n" + "".join(f"{a!r}\n" for a in self.tolist())


def build_empirical(samples) -> EmpiricalMeasure:
    """Sorted copy of the samples as an equal-weight measure.

    Input order is irrelevant; duplicates are preserved.
    """
    a = np.asarray(samples, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("empty measure")
    if not np.all(np.isfinite(a)):
        raise ValueError("measure atoms must be finite")
    return EmpiricalMeasure(np.sort(a))


def _check_p(p: float) -> float:
    p = float(p)
    if not p >= 1.0:
        raise ValueError("p must be >= 1")
    return p


def wasserstein_p_equal(mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                        p: float = 2.0) -> float:
    """W_p between same-size measures: monotone pairing of sorted atoms."""
    p = _check_p(p)
    if mu.n != nu.n:
        raise ValueError(
            f"size mismatch ({mu.n} vs {nu.n}); use wasserstein_p_cross "
            "for unequal sizes")
    d = np.abs(mu.atoms - nu.atoms)
    if p == 2.0:
        return float(np.sqrt(np.mean(d * d)))
    return float(np.mean(d ** p) ** (1.0 / p))


def wasserstein_p_cross(mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                        p: float = 2.0) -> float:
    """W_p between measures of any sizes N, M.

    Sweeps the merged breakpoints {k/N} u {k/M}: between consecutive
    breakpoints both empirical quantile functions are constant, so the
    transport cost integral is a finite sum.  Equals the equal-size distance
    of the M-fold and N-fold atom replications, at O(N+M) cost.
    """
    p = _check_p(p)
    x, y = mu.atoms, nu.atoms
    n, m = x.size, y.size
    if n == m:
        return wasserstein_p_equal(mu, nu, p)
    # k/n and k'/m that represent the same rational are the same float
    # (IEEE division is correctly rounded), so union deduplicates exactly
    u = np.union1d(np.arange(n + 1) / n, np.arange(m + 1) / m)
    w = np.diff(u)
    mid = u[:-1] + 0.5 * w
    i = np.minimum((mid * n).astype(np.intp), n - 1)
    j = np.minimum((mid * m).astype(np.intp), m - 1)
    cost = float(np.dot(w, np.abs(x[i] - y[j]) ** p))
    return cost ** (1.0 / p)


def wasserstein2_to_law(mu: EmpiricalMeasure, law,
                        nodes_per_cell: int = 8) -> float:
    """W_2 between an empirical measure and a law given by its quantile.

    Integrates |Q_mu(u) - Q_law(u)|^2 over (0,1) with fixed-order
    Gauss-Legendre quadrature on each empirical cell (k/N, (k+1)/N), where
    Q_mu is constant; exact up to the law quantile's smoothness within
    cells.
    """
    if nodes_per_cell < 2:
        raise ValueError("nodes_per_cell must be >= 2")
    got = _GL_CACHE.get(nodes_per_cell)
    if got is None:
        got = np.polynomial.legendre.leggauss(nodes_per_cell)
        _GL_CACHE[nodes_per_cell] = got
    t, w = got
    x = mu.atoms
    n = x.size
    # nodes of cell k: (k + (1+t)/2)/n, all strictly inside (0,1)
    u = (np.arange(n)[:, None] + (0.5 + 0.5 * t)[None, :]) / n
    q = np.asarray(law.quantile(u.reshape(-1)), dtype=np.float64)
    d = x[:, None] - q.reshape(n, nodes_per_cell)
    # GL weights sum to 2 on [-1,1]; each cell has mass 1/n
    total = float(np.sum((d * d) @ w)) * 0.5 / n
    return float(np.sqrt(max(total, 0.0)))
