"""Brownian driving noise on an adaptively refined dyadic time grid.

The integrator commits Brownian increments over intervals of the form
[j*h/2^d, (j+1)*h/2^d) where h is the macro step.  When a step is rejected
the interval is bisected and the halves are retried, so the noise layer must
hand out increments whose values do not depend on how often or in what order
anything was refined.  That is achieved by addressing, not streaming: the
Gaussian behind every node is a fixed position in a fixed counter-based
stream (see _rng), and a bisection conditions on the parent increment by the
midpoint rule

    left  = parent/2 + sqrt(width)/2 * Z,
    right = parent - left,

with Z the midpoint draw.  `left`, `right` are cached as computed, and
right recomputes to the same float from the same inputs, so increments over
committed intervals telescope exactly and never change under refinement.

Layout: depth-0 increments live on a word-node stream (one word per
particle, so the scalar view can address a single particle's draw); each
depth d >= 1 has its own ziggurat-node stream carrying the midpoint draws
that split depth d-1, at node position 2j+1 for the midpoint of interval
(d-1, j).  Even positions at depth >= 1 are simply never read.
"""

from __future__ import annotations

import math

import numpy as np

from . import _rng


class PathResolutionError(RuntimeError):
    """Raised when a path is queried or refined below its finest level."""


def locate_dyadic(t: float, base_step: float, max_depth: int, what: str = "time"):
    """Map t to (depth, index) with t ~= index * base_step / 2**depth.

    Times are accepted if they sit within 1e-9 relative of a dyadic grid
    point; anything else is a usage error, not something to silently round.
    """
    r = t / base_step
    for d in range(max_depth + 1):
        scaled = r * (1 << d)
        idx = round(scaled)
        if abs(scaled - idx) <= 1e-9 * max(1.0, abs(scaled)):
            if idx < 0:
                raise ValueError(f"{what} {t!r} is negative")
            return d, idx
    raise ValueError(
        f"{what} {t!r} is not a dyadic multiple of base_step={base_step!r} "
        f"within depth {max_depth}"
    )


class PathBundle:
    """Increments of n_particles independent Brownian motions, vectorized.

    One bundle drives one particle system, or one synchronously coupled pair
    (coupling is just sharing the bundle).  Arrays returned by increment()
    and split() are owned by the internal cache; callers must not modify
    them.

    Identity of every draw: (seed, replica, stream, depth, node, particle).
    """

    def __init__(self, seed: int, replica: int, n_particles: int,
                 base_step: float, *, stream: int = 0, max_depth: int = 40,
                 block: int = 256):
        if n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if base_step <= 0.0:
            raise ValueError("base_step must be positive")
        self.seed = int(seed)
        self.replica = int(replica)
        self.n_particles = int(n_particles)
        self.base_step = float(base_step)
        self.stream = int(stream)
        self.max_depth = int(max_depth)
        self._block = int(block)
        self._sqrt_base = math.sqrt(base_step)
        self._keys = [
            _rng.derive_key(_rng.DOMAIN_NOISE, self.seed, self.replica,
                            self.stream, d)
            for d in range(max_depth + 1)
        ]
        self._drawers: dict[int, _rng.StreamDrawer] = {}
        # sqrt(width)/2 per child depth, precomputed
        self._half_sqrt_w = [0.5 * math.sqrt(base_step / (1 << d))
                             for d in range(max_depth + 1)]
        self._level0: dict[int, np.ndarray] = {}   # block index -> (block, n)
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def _drawer(self, depth: int) -> _rng.StreamDrawer:
        dr = self._drawers.get(depth)
        if dr is None:
            dr = _rng.StreamDrawer(self._keys[depth])
            self._drawers[depth] = dr
        return dr

    def _level0_increment(self, j: int) -> np.ndarray:
        blk, off = divmod(j, self._block)
        rows = self._level0.get(blk)
        if rows is None:
            z = _rng.normals_block(self._keys[0], blk * self._block,
                                   self._block, self.n_particles)
            rows = z * self._sqrt_base
            self._level0[blk] = rows
        return rows[off]

    def increment(self, depth: int, index: int) -> np.ndarray:
        """Brownian increment over [index*h/2^depth, (index+1)*h/2^depth)."""
        if depth == 0:
            return self._level0_increment(index)
        if depth > self.max_depth:
            raise PathResolutionError(
                f"depth {depth} exceeds max_depth {self.max_depth}")
        got = self._cache.get((depth, index))
        if got is None:
            self.split(depth - 1, index >> 1)
            got = self._cache[(depth, index)]
        return got

    def split(self, depth: int, index: int):
        """Bisect interval (depth, index); returns (left, right) increments."""
        child = depth + 1
        if child > self.max_depth:
            raise PathResolutionError(
                f"cannot split below max_depth {self.max_depth}")
        cache = self._cache
        left = cache.get((child, 2 * index))
        if left is not None:
            return left, cache[(child, 2 * index + 1)]
        whole = self.increment(depth, index)
        z = self._drawer(child).normals_zig(2 * index + 1, self.n_particles)
        left = 0.5 * whole + self._half_sqrt_w[depth] * z
        right = whole - left
        cache[(child, 2 * index)] = left
        cache[(child, 2 * index + 1)] = right
        return left, right

    def drop_before(self, macro_index: int) -> None:
        """Forget cached data for times <= macro_index * base_step.

        Purely a memory release: every draw re-derives bit-identically from
        its address, so dropping never changes values.
        """
        for b in [b for b in self._level0
                  if (b + 1) * self._block <= macro_index]:
            del self._level0[b]
        for k in [k for k in self._cache
                  if k[1] + 1 <= macro_index * (1 << k[0])]:
            del self._cache[k]


class BrownianPath:
    """Scalar view of one particle's driving path.

    increment(t0, t1) agrees bit-for-bit with component `particle` of a
    PathBundle of width n_particles at the same (seed, replica, stream).
    This class serves tests and light scalar use; the bundle is the hot
    path.  Midpoint draws mirror the bundle's vector ziggurat nodes, so each
    costs a full n-wide draw here; fine at this tier.
    """

    def __init__(self, seed: int, replica: int, particle: int,
                 base_step: float, *, n_particles: int | None = None,
                 stream: int = 0, max_depth: int = 40):
        if n_particles is None:
            n_particles = particle + 1
        if not 0 <= particle < n_particles:
            raise ValueError("particle index out of range")
        self.particle = int(particle)
        self.n_particles = int(n_particles)
        self.base_step = float(base_step)
        self.max_depth = int(max_depth)
        self._keys = [
            _rng.derive_key(_rng.DOMAIN_NOISE, int(seed), int(replica),
                            int(stream), d)
            for d in range(max_depth + 1)
        ]
        self._sqrt_base = math.sqrt(base_step)
        self._bpn = _rng.word_blocks_per_node(self.n_particles)
        self._cache: dict[tuple[int, int], float] = {}

    def _node_increment(self, depth: int, index: int) -> float:
        got = self._cache.get((depth, index))
        if got is not None:
            return got
        if depth == 0:
            w = index * 4 * self._bpn + self.particle
            got = _rng.word_normal_at(self._keys[0], w) * self._sqrt_base
            self._cache[(0, index)] = got
            return got
        if depth > self.max_depth:
            raise PathResolutionError(
                f"depth {depth} exceeds max_depth {self.max_depth}")
        parent = self._node_increment(depth - 1, index >> 1)
        z = float(_rng.normals_zig_at(self._keys[depth], (index >> 1) * 2 + 1,
                                      self.n_particles)[self.particle])
        width = self.base_step / (1 << (depth - 1))
        left = 0.5 * parent + (0.5 * math.sqrt(width)) * z
        self._cache[(depth, (index >> 1) * 2)] = left
        self._cache[(depth, (index >> 1) * 2 + 1)] = parent - left
        return self._cache[(depth, index)]

    def increment(self, t0: float, t1: float) -> float:
        """W(t1) - W(t0) for dyadic t0 <= t1.

        The interval decomposes into maximal aligned dyadic pieces, so sums
        over adjacent intervals telescope exactly.
        """
        if t1 < t0:
            raise ValueError("t1 must be >= t0")
        d0, a = locate_dyadic(t0, self.base_step, self.max_depth, "t0")
        d1, b = locate_dyadic(t1, self.base_step, self.max_depth, "t1")
        d = max(d0, d1)
        a <<= d - d0
        b <<= d - d1
        total = 0.0
        while a < b:
            step = a & -a if a > 0 else 1 << (b - a).bit_length() - 1
            while step > b - a:
                step >>= 1
            k = step.bit_length() - 1
            if k > d:
                k = d
            total += self._node_increment(d - k, a >> k)
            a += 1 << k
        return total
