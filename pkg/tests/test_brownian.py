"""Dyadic Brownian driver: consistency, determinism, independence."""

import numpy as np
import pytest

from rieszgas.brownian import (
    BrownianPath,
    PathBundle,
    PathResolutionError,
    locate_dyadic,
)


def test_locate_dyadic_exact_and_snapped():
    assert locate_dyadic(0.0, 1e-3, 40) == (0, 0)
    assert locate_dyadic(0.3, 1e-3, 40) == (0, 300)
    d, idx = locate_dyadic(0.0005, 1e-3, 40)
    assert (d, idx) == (1, 1)


def test_locate_dyadic_rejects_non_dyadic():
    # the snap is relative, so a depth budget is what rejects odd times
    with pytest.raises(ValueError):
        locate_dyadic(1e-3 / 3.0, 1e-3, 8)
    with pytest.raises(ValueError):
        locate_dyadic(-1e-3, 1e-3, 8)


def test_increment_variance_within_5_percent():
    # 10^4 independent depth-0 increments over [0, 1]
    b = PathBundle(seed=7, replica=0, n_particles=10_000, base_step=1.0)
    w = b.increment(0, 0)
    assert w.shape == (10_000,)
    assert abs(float(np.var(w)) - 1.0) < 0.05


def test_additivity_telescopes_exactly():
    p = BrownianPath(seed=3, replica=1, particle=0, base_step=1.0)
    whole = p.increment(0.0, 1.0)
    left = p.increment(0.0, 0.5)
    right = p.increment(0.5, 1.0)
    assert whole - left - right == 0.0
    # deeper split of the left half telescopes too
    ll = p.increment(0.0, 0.25)
    lr = p.increment(0.25, 0.5)
    assert left - ll - lr == 0.0


def test_repeated_query_identical():
    p = BrownianPath(seed=5, replica=2, particle=0, base_step=0.5)
    v1 = p.increment(0.0, 0.5)
    v2 = p.increment(0.0, 0.5)
    assert v1 == v2
    q = BrownianPath(seed=5, replica=2, particle=0, base_step=0.5)
    assert q.increment(0.0, 0.5) == v1


def test_bisection_preserves_coarse_increment():
    b = PathBundle(seed=11, replica=0, n_particles=4, base_step=1e-3)
    coarse = b.increment(0, 5).copy()
    # refine far below, then re-read the coarse value
    l, r = b.split(0, 5)
    b.split(1, 10)
    b.split(2, 20)
    np.testing.assert_array_equal(b.increment(0, 5), coarse)
    # right is stored as fl(whole - left), so this difference is exactly 0
    assert np.all(coarse - l - r == 0.0)


def test_split_children_sum_bitwise():
    b = PathBundle(seed=2, replica=3, n_particles=8, base_step=1.0)
    whole = b.increment(0, 0)
    left, right = b.split(0, 0)
    # right is stored as whole - left, so the telescoped difference is 0
    assert np.all(whole - left - right == 0.0)
    l2, r2 = b.split(0, 0)
    np.testing.assert_array_equal(l2, left)
    np.testing.assert_array_equal(r2, right)


def test_bundle_scalar_view_bit_identity():
    seed, replica, base = 13, 4, 1e-3
    n = 5
    b = PathBundle(seed, replica, n, base)
    b.split(0, 0)
    b.split(1, 1)
    for particle in range(n):
        p = BrownianPath(seed, replica, particle, base, n_particles=n)
        assert p.increment(0.0, base) == b.increment(0, 0)[particle]
        assert p.increment(0.0, base / 2) == b.increment(1, 0)[particle]
        assert p.increment(base * 0.75, base) == b.increment(2, 3)[particle]


def test_distinct_particles_uncorrelated():
    b = PathBundle(seed=17, replica=0, n_particles=2, base_step=1.0,
                   block=10_000)
    rows = np.stack([b.increment(0, j) for j in range(10_000)])
    corr = float(np.corrcoef(rows[:, 0], rows[:, 1])[0, 1])
    assert abs(corr) < 0.03


def test_distinct_streams_differ():
    a = PathBundle(seed=1, replica=0, n_particles=3, base_step=1.0, stream=0)
    c = PathBundle(seed=1, replica=0, n_particles=3, base_step=1.0, stream=1)
    assert not np.array_equal(a.increment(0, 0), c.increment(0, 0))


def test_depth_limit_raises():
    b = PathBundle(seed=1, replica=0, n_particles=2, base_step=1.0,
                   max_depth=3)
    b.increment(3, 0)
    with pytest.raises(PathResolutionError):
        b.increment(4, 0)
    with pytest.raises(PathResolutionError):
        b.split(3, 0)


def test_drop_before_never_changes_values():
    b = PathBundle(seed=9, replica=1, n_particles=3, base_step=1e-3,
                   block=4)
    vals = {(0, j): b.increment(0, j).copy() for j in range(12)}
    vals[(1, 2)] = b.increment(1, 2).copy()
    b.drop_before(9)
    for (d, j), v in vals.items():
        np.testing.assert_array_equal(b.increment(d, j), v)


def test_constructor_validation():
    with pytest.raises(ValueError):
        PathBundle(0, 0, 0, 1.0)
    with pytest.raises(ValueError):
        PathBundle(0, 0, 2, 0.0)
    with pytest.raises(ValueError):
        BrownianPath(0, 0, particle=3, base_step=1.0, n_particles=2)


def test_scalar_increment_validation():
    p = BrownianPath(seed=0, replica=0, particle=0, base_step=1.0)
    with pytest.raises(ValueError):
        p.increment(1.0, 0.5)
