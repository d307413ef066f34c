"""Order-preserving adaptive time stepping for the singular particle SDE.

Scheme: Lie splitting per committed time piece.  Sub-step (a) applies
confinement drift and noise in one explicit update; sub-step (b) integrates
the pure repulsion flow with explicit internal sub-steps small enough that
no particle moves more than a fixed fraction of its neighbouring gap, so
particles cannot cross during (b) by construction.  A piece is accepted only
if the noise scale fits the current minimum gap and the post-noise state is
still strictly ordered; otherwise the piece is rejected, the Brownian paths
are bisected (bridge refinement keeps rejection unbiased), and both halves
are retried recursively.  Committed pieces tile each base step with a dyadic
partition whose local resolution follows the gap structure.

Time bookkeeping is integer dyadic: a piece is (depth, index) with extent
[index*h_max/2^depth, (index+1)*h_max/2^depth).  Output times are matched on
that integer grid, never by float comparison, and a piece is force-bisected
whenever a requested output time falls strictly inside it, so trajectories
are sampled exactly at output times.

Depth-limit policy.  At alpha = 1 with sigma = 1/N the neighbouring-gap
process is a critical two-dimensional Bessel process: it never reaches zero
but revisits every small scale with only logarithmic protection, so over
order-one time horizons some gap dives below any fixed resolution with high
probability.  No bisection budget can hold such excursions.  When a piece at
the maximum depth still cannot satisfy the noise gate, the engine follows
SchemeConfig.depth_limit_policy: "error" propagates the path-resolution
failure (the strictly faithful behaviour), while "freeze" suppresses the
relative noise inside the offending pinched clusters for that piece only,
replacing each cluster member's increment by the cluster mean.  The cluster
centre still moves exactly with the stored path, ordering is preserved
because the repulsion flow expands the pinch deterministically, and the
number of guarded pieces is reported.  The fraction of simulated time spent
under the guard scales like N*(resolution gap / typical gap)^2; max_depth is
therefore the resolution-floor knob, trading unresolved sub-gap detail
against the piece rate 2*sigma*N/(theta_diff*typical gap)^2 that a critical
gap forces on the whole system.

Noisy large systems may opt into a lazily refreshed far field: the repulsion
force is split into an exact near part (a few neighbours each side)
recomputed every flow sub-step plus a far remainder frozen at each base-step
entry.  Ordering safety depends only on the near part, which stays exact.
Runs with sigma = 0 never use the lazy path.

The engine recycles a fixed set of buffers (state ping-pong, gap vector,
force and scratch arrays), so a committed piece allocates nothing.  Arrays
handed to an on_piece hook are those live buffers: hooks must copy anything
they keep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from .brownian import PathBundle, PathResolutionError, locate_dyadic
from .dynamics import (
    ForceKernel,
    ModelParams,
    ParticleConfig,
    QuadraticConfinement,
    energy_H_alpha,
    lyapunov_Hcal,
    weighted_interaction_stat,
)


class StepFailureError(RuntimeError):
    """Too many rejections (or a stalled flow); carries the offending state."""

    def __init__(self, message: str, state: np.ndarray | None = None,
                 time: float | None = None):
        super().__init__(message)
        self.state = None if state is None else np.array(state)
        self.time = time


class NearCollisionError(RuntimeError):
    """A gap fell to the hard floor; the trajectory cannot be continued."""

    def __init__(self, message: str, state: np.ndarray | None = None,
                 time: float | None = None):
        super().__init__(message)
        self.state = None if state is None else np.array(state)
        self.time = time


@dataclass(frozen=True)
class SchemeConfig:
    """Tuning knobs of the adaptive splitting scheme.

    theta_drift caps how far (relative to the smaller neighbouring gap) a
    particle may move in one repulsion sub-step; theta_diff caps the noise
    standard deviation relative to the minimum gap.  lazy_threshold is the
    smallest N at which noisy runs switch to the frozen far field (None
    disables it entirely).  depth_limit_policy chooses what happens when the
    noise gate still fails at max_depth: "error" raises, "freeze" suppresses
    relative noise inside the unresolvable pinched clusters for that piece.
    """

    h_max: float = 1e-3
    theta_drift: float = 0.25
    theta_diff: float = 0.25
    gap_floor: float = 1e-12
    max_rejections: int = 60
    max_depth: int = 40
    lazy_threshold: int | None = 400
    near_neighbors: int = 4
    depth_limit_policy: Literal["error", "freeze"] = "error"

    def __post_init__(self):
        if not self.h_max > 0.0:
            raise ValueError("h_max must be positive")
        if not 0.0 < self.theta_drift < 1.0:
            raise ValueError("theta_drift must lie in (0, 1)")
        if not 0.0 < self.theta_diff < 1.0:
            raise ValueError("theta_diff must lie in (0, 1)")
        if not self.gap_floor > 0.0:
            raise ValueError("gap_floor must be positive")
        if self.max_rejections < 1:
            raise ValueError("max_rejections must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.lazy_threshold is not None and self.lazy_threshold < 3:
            raise ValueError("lazy_threshold must be >= 3 (or None)")
        if self.near_neighbors < 1:
            raise ValueError("near_neighbors must be >= 1")
        if self.depth_limit_policy not in ("error", "freeze"):
            raise ValueError('depth_limit_policy must be "error" or "freeze"')


@dataclass
class SampledTrajectory:
    """States and diagnostics on the requested output grid."""

    times: np.ndarray
    states: list
    diagnostics: dict
    accepted: int
    rejected: int
    guarded: int = 0

    @property
    def final_state(self) -> ParticleConfig:
        return self.states[-1]

    def positions_array(self) -> np.ndarray:
        return np.stack([s.positions for s in self.states])

    def positions_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("time,particle_index,position\n")
            for t, s in zip(self.times, self.states):
                for i, xi in enumerate(s.positions):
                    fh.write(f"{float(t)!r},{i},{float(xi)!r}\n")

    def diagnostics_csv(self, path) -> None:
        cols = ["Hcal", "H_alpha", "S_stat", "m2", "m4"]
        with open(path, "w") as fh:
            fh.write("time," + ",".join(cols) + "\n")
            for i, t in enumerate(self.times):
                row = ",".join(repr(float(self.diagnostics[c][i])) for c in cols)
                fh.write(f"{float(t)!r},{row}\n")


def _strictly_increasing(x: np.ndarray) -> bool:
    return bool(np.all(x[1:] > x[:-1]))


def _kernel_inplace(d: np.ndarray, alpha: float) -> None:
    """d <- 1/d^alpha for strictly positive d (near-field gap columns)."""
    if alpha == 1.0:
        np.divide(1.0, d, out=d)
    elif alpha == 2.0:
        np.multiply(d, d, out=d)
        np.divide(1.0, d, out=d)
    else:
        np.power(d, -alpha, out=d)


def cluster_mean_increments(dw: np.ndarray, link: np.ndarray) -> np.ndarray:
    """Average dw within particle clusters defined by linked adjacent pairs.

    link[i] true means particles i and i+1 belong to one cluster.  Members
    of a cluster all receive the cluster mean; singletons keep their value.
    The total (and hence the cluster centre's motion) is preserved exactly
    up to the mean's round-off.
    """
    n = dw.size
    breaks = np.empty(n, dtype=bool)
    breaks[0] = True
    np.logical_not(link, out=breaks[1:])
    cid = np.cumsum(breaks) - 1
    sums = np.bincount(cid, weights=dw)
    counts = np.bincount(cid)
    return (sums / counts)[cid]


class _Engine:
    """Per-trajectory integration state: kernels, buffers, carried gap data.

    The minimum gap of the current state is carried between pieces instead
    of being recomputed, and the state arrays ping-pong between two buffers:
    the post-noise vector is built in the spare buffer, the repulsion flow
    runs on it in place, and on commit the old state buffer becomes the new
    spare.  A rejection leaves the current buffer (and carried gap) intact.
    """

    def __init__(self, params: ModelParams, scheme: SchemeConfig, n: int,
                 bundle: PathBundle | None,
                 on_piece: Callable | None = None):
        self.p = params
        self.s = scheme
        self.n = n
        self.bundle = bundle
        self.kernel = ForceKernel(n, params.alpha)
        self.sig_coef = math.sqrt(2.0 * params.sigma)
        conf = params.confinement
        self._lam = conf.lam if isinstance(conf, QuadraticConfinement) else None
        self._uprime = conf.uprime
        self.depth_cap = scheme.max_depth
        if bundle is not None:
            self.depth_cap = min(self.depth_cap, bundle.max_depth)
        self.lazy = (params.sigma > 0.0
                     and scheme.lazy_threshold is not None
                     and n >= scheme.lazy_threshold
                     and n > 2 * scheme.near_neighbors)
        self._alpha = params.alpha
        self._a1 = params.alpha + 1.0
        self._move_frac = min(scheme.theta_drift, 0.45)
        self._far = np.zeros(n)
        self._force = np.empty(n)
        self._tmp = np.empty(n)
        self._spare = np.empty(n)
        self._gbuf = np.empty(n - 1 if n > 1 else 1)
        kmax = min(scheme.near_neighbors, n - 1) if n > 1 else 0
        self._kmax = kmax
        self._dist = [np.empty(n - o) for o in range(2, kmax + 1)]
        # per-depth piece lengths and noise standard deviations
        self._h = [math.ldexp(scheme.h_max, -d)
                   for d in range(self.depth_cap + 1)]
        self._ns = [self.sig_coef * math.sqrt(h) for h in self._h]
        self.on_piece = on_piece
        self.accepted = 0
        self.rejected = 0
        self.guarded = 0
        self._macro_rejections = 0
        self._gmin = math.inf

    def begin(self, x: np.ndarray) -> None:
        """Prime the carried minimum gap for the given current state."""
        if self.n > 1:
            self._gmin = float(np.min(np.diff(x)))
        else:
            self._gmin = math.inf

    # ---- forces ----------------------------------------------------------

    def _near_from_gaps(self, gb: np.ndarray, out: np.ndarray) -> None:
        """Near-field force from the gap vector gb (which it destroys).

        Distances to the o-th neighbour are running sums of adjacent gaps,
        so no position differences are recomputed.
        """
        n = self.n
        dist = self._dist
        prev = gb
        for j, ob in enumerate(dist):
            np.add(prev[: n - j - 2], gb[j + 1:], out=ob)
            prev = ob
        out[:] = 0.0
        _kernel_inplace(gb, self._alpha)
        out[1:] += gb
        out[:-1] -= gb
        for j, ob in enumerate(dist):
            o = j + 2
            _kernel_inplace(ob, self._alpha)
            out[o:] += ob
            out[:-o] -= ob
        out /= n

    def refresh_far_field(self, x: np.ndarray) -> None:
        if not self.lazy:
            return
        self.kernel(x, self._far)
        np.subtract(x[1:], x[:-1], out=self._gbuf)
        self._near_from_gaps(self._gbuf, self._tmp)
        self._far -= self._tmp

    # ---- one committed piece ---------------------------------------------

    def _piece_time(self, depth: int, index: int) -> float:
        return math.ldexp(float(index), -depth) * self.s.h_max

    def _register_rejection(self, x: np.ndarray, depth: int, index: int) -> None:
        self.rejected += 1
        self._macro_rejections += 1
        if self._macro_rejections > self.s.max_rejections:
            t = self._piece_time(depth, index)
            raise StepFailureError(
                f"step failure: {self._macro_rejections} rejections within one "
                f"base step at t={t:.6g}; min gap "
                f"{float(np.min(np.diff(x))) if self.n > 1 else math.inf:.3e}; "
                f"state={np.array2string(x, threshold=16)}",
                state=x, time=t)

    def _bisect(self, x: np.ndarray, depth: int, index: int,
                recorder) -> np.ndarray:
        if depth >= self.depth_cap:
            t = self._piece_time(depth, index)
            if self.bundle is not None:
                raise PathResolutionError(
                    f"path resolution limit: refinement beyond depth "
                    f"{self.depth_cap} needed at t={t:.6g}")
            raise StepFailureError(
                f"step failure: bisection beyond max depth {self.depth_cap} "
                f"at t={t:.6g}", state=x, time=t)
        if self.bundle is not None:
            self.bundle.split(depth, index)
        left = self.advance_node(x, depth + 1, 2 * index, recorder)
        return self.advance_node(left, depth + 1, 2 * index + 1, recorder)

    def _drift_into(self, x: np.ndarray, h: float, y: np.ndarray) -> None:
        if self._lam is not None:
            np.multiply(x, 1.0 - self._lam * h, out=y)
        else:
            np.multiply(self._uprime(x), -h, out=y)
            y += x

    def _finish(self, x_old: np.ndarray, y: np.ndarray, g_entry: float,
                h: float, depth: int, index: int, recorder) -> np.ndarray:
        z = self._repulsion_flow(y, g_entry, h, depth, index)
        self.accepted += 1
        self._spare = x_old
        if recorder is not None:
            recorder.piece_end(depth, index, z)
        return z

    def _guarded_commit(self, x: np.ndarray, depth: int, index: int,
                        recorder) -> np.ndarray:
        """Commit a depth-capped piece by suppressing unresolvable relative
        noise: pinched clusters receive their mean increment."""
        h = self._h[depth]
        dw = self.bundle.increment(depth, index)
        gb = self._gbuf
        np.subtract(x[1:], x[:-1], out=gb)
        link = self._ns[depth] > self.s.theta_diff * gb
        base = self._tmp
        self._drift_into(x, h, base)
        y = self._spare
        dwp = None
        for _ in range(self.n):
            dwp = cluster_mean_increments(dw, link)
            np.multiply(dwp, self.sig_coef, out=y)
            y += base
            np.subtract(y[1:], y[:-1], out=gb)
            bad = gb <= 0.0
            if not bad.any():
                break
            grew = bad & ~link
            if not grew.any():
                t = self._piece_time(depth, index)
                raise StepFailureError(
                    "step failure: ordering unresolvable under frozen "
                    f"relative noise at t={t:.6g}", state=x, time=t)
            link |= bad
        else:
            t = self._piece_time(depth, index)
            raise StepFailureError(
                "step failure: cluster freezing did not stabilize "
                f"at t={t:.6g}", state=x, time=t)
        ygmin = float(gb.min())
        self.guarded += 1
        if self.on_piece is not None:
            self.on_piece(self._piece_time(depth, index), h, x, dwp)
        return self._finish(x, y, ygmin, h, depth, index, recorder)

    def advance_node(self, x: np.ndarray, depth: int, index: int,
                     recorder) -> np.ndarray:
        """Advance across piece (depth, index), committing or bisecting."""
        if recorder is not None and recorder.wants_interior(depth, index):
            return self._bisect(x, depth, index, recorder)

        s = self.s
        g = self._gmin
        if g <= s.gap_floor:
            t = self._piece_time(depth, index)
            raise NearCollisionError(
                f"near-collision: min gap {g:.3e} at t={t:.6g}",
                state=x, time=t)

        h = self._h[depth]
        y = self._spare
        if self.sig_coef > 0.0:
            if self._ns[depth] > s.theta_diff * g:
                if depth >= self.depth_cap and s.depth_limit_policy == "freeze":
                    return self._guarded_commit(x, depth, index, recorder)
                self._register_rejection(x, depth, index)
                return self._bisect(x, depth, index, recorder)
            dw = self.bundle.increment(depth, index)
            self._drift_into(x, h, y)
            np.multiply(dw, self.sig_coef, out=self._tmp)
            y += self._tmp
            if self.n > 1:
                gb = self._gbuf
                np.subtract(y[1:], y[:-1], out=gb)
                ygmin = float(gb.min())
                if not ygmin > 0.0:
                    if (depth >= self.depth_cap
                            and s.depth_limit_policy == "freeze"):
                        return self._guarded_commit(x, depth, index, recorder)
                    self._register_rejection(x, depth, index)
                    return self._bisect(x, depth, index, recorder)
            else:
                ygmin = math.inf
            if self.on_piece is not None:
                self.on_piece(self._piece_time(depth, index), h, x, dw)
        else:
            self._drift_into(x, h, y)
            if self.n > 1:
                gb = self._gbuf
                np.subtract(y[1:], y[:-1], out=gb)
                ygmin = float(gb.min())
                if not ygmin > 0.0:
                    self._register_rejection(x, depth, index)
                    return self._bisect(x, depth, index, recorder)
            else:
                ygmin = math.inf

        return self._finish(x, y, ygmin, h, depth, index, recorder)

    def _repulsion_flow(self, y: np.ndarray, g: float, h: float,
                        depth: int, index: int) -> np.ndarray:
        """Explicit sub-stepped integration of dy/dt = repulsion(y), in place.

        g must be the current minimum gap of y; self._gbuf must hold y's gap
        vector.  On return self._gmin carries the exit minimum gap.
        """
        if self.n == 1:
            self._gmin = math.inf
            return y
        s = self.s
        gb = self._gbuf
        F = self._force
        tmp = self._tmp
        lazy = self.lazy
        kernel = self.kernel
        consumed = 0.0
        substeps = 0
        while True:
            if g <= s.gap_floor:
                t = self._piece_time(depth, index)
                raise NearCollisionError(
                    f"near-collision: min gap {g:.3e} in repulsion flow "
                    f"at t={t:.6g}", state=y, time=t)
            if lazy:
                self._near_from_gaps(gb, F)
                F += self._far
            else:
                kernel(y, F)
            np.abs(F, out=tmp)
            fmax = float(tmp.max())
            cap = s.theta_drift * self.n * g ** self._a1
            if fmax > 0.0:
                move = self._move_frac * g / fmax
                if move < cap:
                    cap = move
            rem = h - consumed
            final = cap >= rem
            np.multiply(F, rem if final else cap, out=tmp)
            y += tmp
            np.subtract(y[1:], y[:-1], out=gb)
            g = float(gb.min())
            if final:
                break
            consumed += cap
            substeps += 1
            if substeps > 2_000_000:
                t = self._piece_time(depth, index)
                raise StepFailureError(
                    f"step failure: repulsion flow stalled at t={t:.6g} "
                    f"(min gap {g:.3e})", state=y, time=t)
        if not g > 0.0:
            t = self._piece_time(depth, index)
            raise StepFailureError(
                "step failure: ordering lost in repulsion flow at "
                f"t={t:.6g}", state=y, time=t)
        self._gmin = g
        return y

    def advance_macro(self, x: np.ndarray, macro: int, recorder) -> np.ndarray:
        self._macro_rejections = 0
        if self.lazy:
            self.refresh_far_field(x)
        return self.advance_node(x, 0, macro, recorder)


class _Recorder:
    """Integer-grid matching of committed piece boundaries to output times."""

    def __init__(self, output_times: Sequence[float], h_max: float,
                 max_depth: int):
        self._shift = max_depth + 4
        nums = []
        for t in output_times:
            d, i = locate_dyadic(t, h_max, max_depth, what="output time")
            nums.append(i << (self._shift - d))
        if any(b <= a for a, b in zip(nums, nums[1:])):
            raise ValueError("output times must be strictly increasing")
        self._nums = nums
        self._ptr = 0
        self.states: list[np.ndarray] = []

    def wants_interior(self, depth: int, index: int) -> bool:
        if self._ptr >= len(self._nums):
            return False
        lo = index << (self._shift - depth)
        hi = (index + 1) << (self._shift - depth)
        v = self._nums[self._ptr]
        return lo < v < hi

    def piece_end(self, depth: int, index: int, x: np.ndarray) -> None:
        if self._ptr >= len(self._nums):
            return
        if self._nums[self._ptr] == (index + 1) << (self._shift - depth):
            self.states.append(x.copy())
            self._ptr += 1

    def record_time_zero(self, x: np.ndarray) -> None:
        if self._ptr < len(self._nums) and self._nums[self._ptr] == 0:
            self.states.append(x.copy())
            self._ptr += 1

    @property
    def complete(self) -> bool:
        return self._ptr == len(self._nums)


def _macro_count(t_end: float, h_max: float) -> int:
    m = t_end / h_max
    mr = round(m)
    if mr < 1 or abs(m - mr) > 1e-9 * max(1.0, abs(m)):
        raise ValueError("t_end must be a positive integer multiple of h_max")
    return int(mr)


def _validate_outputs(output_times, t_end: float):
    out = [float(t) for t in output_times]
    for t in out:
        if not 0.0 <= t <= t_end * (1.0 + 1e-12):
            raise ValueError("output times must lie in [0, t_end]")
    return out


def _diagnostics_for(states, params: ModelParams) -> dict:
    cols = {"Hcal": [], "H_alpha": [], "S_stat": [], "m2": [], "m4": []}
    for s in states:
        x = s.positions
        cols["Hcal"].append(lyapunov_Hcal(x))
        cols["H_alpha"].append(energy_H_alpha(x, params))
        cols["S_stat"].append(weighted_interaction_stat(x, params.alpha))
        cols["m2"].append(float(np.mean(x * x)))
        cols["m4"].append(float(np.mean(x ** 4)))
    return {k: np.array(v) for k, v in cols.items()}


def step(state: ParticleConfig, h: float, params: ModelParams,
         scheme: SchemeConfig, paths: PathBundle | None = None, *,
         on_piece: Callable | None = None) -> ParticleConfig:
    """One committed macro piece of length h starting at state.time.

    h must be h_max/2^d for some d >= 0 (so the piece sits on the dyadic
    grid shared with the Brownian paths) and state.time a multiple of h.
    """
    if not h > 0.0:
        raise ValueError("h must be positive")
    base = scheme.h_max if paths is None else paths.base_step
    depth = None
    rel = h / base
    for d in range(scheme.max_depth + 1):
        if abs(rel * (1 << d) - 1.0) < 1e-9:
            depth = d
            break
    if depth is None:
        raise ValueError("h must equal h_max / 2^d for some d >= 0")
    k = state.time / h
    kr = round(k)
    if abs(k - kr) > 1e-9 * max(1.0, abs(k)):
        raise ValueError("state.time must sit on the dyadic grid of h")
    if params.sigma > 0.0 and paths is None:
        raise ValueError("noisy dynamics need a path bundle")
    if paths is not None and paths.n_particles != state.n:
        raise ValueError("path bundle particle count does not match state")

    eng = _Engine(params, scheme, state.n, paths, on_piece=on_piece)
    if depth > eng.depth_cap:
        raise ValueError("h is finer than the path bundle's resolution")
    eng._macro_rejections = 0
    x = state.positions.copy()
    eng.begin(x)
    if eng.lazy:
        eng.refresh_far_field(x)
    x1 = eng.advance_node(x, depth, int(kr), None)
    return ParticleConfig(x1, state.time + h)


def simulate(params: ModelParams, scheme: SchemeConfig,
             initial: ParticleConfig, t_end: float, output_times,
             seed: int, replica: int, *, stream: int = 0,
             on_piece: Callable | None = None,
             collect_diagnostics: bool = True) -> SampledTrajectory:
    """Integrate one trajectory, sampling exactly at output_times."""
    if initial.time != 0.0:
        raise ValueError("initial configuration must be at time 0")
    if params.n_particles != initial.n:
        raise ValueError("params.n_particles does not match initial state")
    outs = _validate_outputs(output_times, t_end)
    x = initial.positions.copy()
    n = x.size

    if t_end == 0.0 or not outs:
        times = outs if outs else [0.0]
        states = [ParticleConfig(x, t) for t in times]
        diags = _diagnostics_for(states, params) if collect_diagnostics else {}
        return SampledTrajectory(np.array(times), states, diags, 0, 0)

    n_macros = _macro_count(t_end, scheme.h_max)
    bundle = None
    if params.sigma > 0.0:
        bundle = PathBundle(seed, replica, n, scheme.h_max, stream=stream,
                            max_depth=scheme.max_depth)
    eng = _Engine(params, scheme, n, bundle, on_piece=on_piece)
    rec = _Recorder(outs, scheme.h_max, scheme.max_depth)
    rec.record_time_zero(x)
    eng.begin(x)
    try:
        for m in range(n_macros):
            x = eng.advance_macro(x, m, rec)
            if bundle is not None:
                bundle.drop_before(m + 1)
    except (StepFailureError, NearCollisionError) as e:
        e.args = (f"{e.args[0]} [replica {replica}]",) + e.args[1:]
        raise
    if not rec.complete:
        raise RuntimeError("internal error: output times not all realized")

    states = [ParticleConfig(xs, t) for xs, t in zip(rec.states, outs)]
    diags = _diagnostics_for(states, params) if collect_diagnostics else {}
    return SampledTrajectory(np.array(outs), states, diags,
                             eng.accepted, eng.rejected, eng.guarded)


def simulate_synchronous_pair(params: ModelParams, scheme: SchemeConfig,
                              init_x: ParticleConfig, init_y: ParticleConfig,
                              t_end: float, output_times, seed: int,
                              replica: int, *, stream: int = 0,
                              collect_diagnostics: bool = True):
    """Two systems driven by the identical Brownian paths.

    Each system keeps its own adaptive piece partition; the shared bundle
    guarantees both read bit-identical increments over any common interval.
    """
    if init_x.n != init_y.n:
        raise ValueError("coupled systems must have the same particle count")
    if init_x.time != 0.0 or init_y.time != 0.0:
        raise ValueError("initial configurations must be at time 0")
    if params.n_particles != init_x.n:
        raise ValueError("params.n_particles does not match initial states")
    outs = _validate_outputs(output_times, t_end)
    n = init_x.n

    if t_end == 0.0 or not outs:
        times = outs if outs else [0.0]
        sx = [ParticleConfig(init_x.positions, t) for t in times]
        sy = [ParticleConfig(init_y.positions, t) for t in times]
        dx = _diagnostics_for(sx, params) if collect_diagnostics else {}
        dy = _diagnostics_for(sy, params) if collect_diagnostics else {}
        ta = np.array(times)
        return (SampledTrajectory(ta, sx, dx, 0, 0),
                SampledTrajectory(ta.copy(), sy, dy, 0, 0))

    n_macros = _macro_count(t_end, scheme.h_max)
    bundle = None
    if params.sigma > 0.0:
        bundle = PathBundle(seed, replica, n, scheme.h_max, stream=stream,
                            max_depth=scheme.max_depth)
    eng_x = _Engine(params, scheme, n, bundle)
    eng_y = _Engine(params, scheme, n, bundle)
    rec_x = _Recorder(outs, scheme.h_max, scheme.max_depth)
    rec_y = _Recorder(outs, scheme.h_max, scheme.max_depth)
    x = init_x.positions.copy()
    y = init_y.positions.copy()
    rec_x.record_time_zero(x)
    rec_y.record_time_zero(y)
    eng_x.begin(x)
    eng_y.begin(y)
    try:
        for m in range(n_macros):
            x = eng_x.advance_macro(x, m, rec_x)
            y = eng_y.advance_macro(y, m, rec_y)
            if bundle is not None:
                bundle.drop_before(m + 1)
    except (StepFailureError, NearCollisionError) as e:
        e.args = (f"{e.args[0]} [replica {replica}]",) + e.args[1:]
        raise
    if not (rec_x.complete and rec_y.complete):
        raise RuntimeError("internal error: output times not all realized")

    states_x = [ParticleConfig(xs, t) for xs, t in zip(rec_x.states, outs)]
    states_y = [ParticleConfig(ys, t) for ys, t in zip(rec_y.states, outs)]
    dgx = _diagnostics_for(states_x, params) if collect_diagnostics else {}
    dgy = _diagnostics_for(states_y, params) if collect_diagnostics else {}
    ta = np.array(outs)
    return (SampledTrajectory(ta, states_x, dgx, eng_x.accepted,
                              eng_x.rejected, eng_x.guarded),
            SampledTrajectory(ta.copy(), states_y, dgy, eng_y.accepted,
                              eng_y.rejected, eng_y.guarded))
