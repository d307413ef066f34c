"""Forces, energies, and the explicit lemma-scale constants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rieszgas.dynamics import (
    ForceKernel,
    LipschitzConfinement,
    ModelParams,
    ParticleConfig,
    QuadraticConfinement,
    c_alpha_n,
    energy_H_alpha,
    fourth_moment_generator_drift,
    full_drift,
    grid_force_norm,
    grid_force_ratios,
    lyapunov_Hcal,
    pair_power_stat,
    raw_force_vector,
    riesz_force,
    series_bound_check,
    weighted_interaction_stat,
)


def params(n, alpha=1.0, lam=1.0, sigma=0.0):
    return ModelParams.quadratic(n, alpha, lam, sigma)


ordered_configs = st.integers(2, 24).flatmap(
    lambda n: st.lists(st.integers(-200, 200), min_size=n, max_size=n,
                       unique=True))


# -- types ------------------------------------------------------------------

def test_particle_config_validation():
    with pytest.raises(ValueError):
        ParticleConfig(np.array([0.0, 0.0]))
    with pytest.raises(ValueError):
        ParticleConfig(np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        ParticleConfig(np.array([]))
    with pytest.raises(ValueError):
        ParticleConfig(np.array([0.0, np.inf]))
    with pytest.raises(ValueError):
        ParticleConfig(np.array([0.0]), time=-1.0)
    c = ParticleConfig(np.array([0.0, 1.0]))
    assert c.n == 2 and c.min_gap() == 1.0
    with pytest.raises(ValueError):
        c.positions[0] = 5.0
    assert ParticleConfig(np.array([3.0])).min_gap() == math.inf


def test_model_params_validation():
    with pytest.raises(ValueError):
        params(0)
    with pytest.raises(ValueError):
        params(2, alpha=0.5)
    with pytest.raises(ValueError):
        ModelParams.quadratic(2, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        ModelParams.quadratic(2, 1.0, 1.0, -0.1)
    lip = ModelParams(2, 1.0, LipschitzConfinement(np.tanh, 1.0), 0.0)
    with pytest.raises(AttributeError):
        lip.lam


def test_lipschitz_confinement_declared_constants_spot_check():
    conf = LipschitzConfinement(np.tanh, lipschitz=1.0, linear_bound=0.0)
    rng = np.random.default_rng(1)
    x, y = rng.normal(0, 3, 500), rng.normal(0, 3, 500)
    assert np.all(np.abs(conf.uprime(x) - conf.uprime(y))
                  <= 1.0 * np.abs(x - y) + 1e-12)
    assert np.all(np.abs(conf.uprime(x)) <= 1.0 * np.abs(x) + 1e-12)


# -- forces -----------------------------------------------------------------

def test_riesz_force_two_particle():
    f = riesz_force(np.array([-0.5, 0.5]), params(2))
    np.testing.assert_allclose(f, [-0.5, 0.5], atol=1e-15)


def test_riesz_force_alpha2_middle_component():
    f = riesz_force(np.array([0.0, 1.0, 3.0]), params(3, alpha=2.0))
    assert f[1] == pytest.approx((1.0 - 0.25) / 3.0, abs=1e-14)


def test_riesz_force_single_particle_zero():
    np.testing.assert_array_equal(riesz_force(np.array([4.0]), params(1)),
                                  [0.0])


def test_riesz_force_collision_error():
    with pytest.raises(ValueError, match="collision"):
        riesz_force(np.array([0.0, 0.0, 1.0]), params(3))


def test_full_drift_examples():
    d = full_drift(np.array([-0.5, 0.5]), params(2))
    np.testing.assert_allclose(d, [0.0, 0.0], atol=1e-15)
    d = full_drift(np.array([3.0]), ModelParams.quadratic(1, 1.0, 2.0, 0.0))
    np.testing.assert_allclose(d, [-6.0], atol=1e-14)
    s = 1.0 / math.sqrt(2.0)
    d = full_drift(np.array([-s, 0.0, s]), params(3))
    np.testing.assert_allclose(d, [0.0, 0.0, 0.0], atol=1e-12)


@settings(max_examples=120, deadline=None)
@given(ordered_configs, st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_force_antisymmetry_sums_to_zero(ints, alpha):
    x = np.sort(np.array(ints, dtype=np.float64)) / 16.0
    f = riesz_force(x, params(x.size, alpha=alpha))
    scale = float(np.max(np.abs(f))) + 1.0
    assert abs(float(f.sum())) <= 1e-12 * scale * x.size
    if x.size >= 2:
        assert f[0] < 0 < f[-1]


@settings(max_examples=60, deadline=None)
@given(ordered_configs, st.integers(-8, 8))
def test_force_translation_covariance(ints, c):
    # dyadic coordinates make the float shift exact, so equality is exact
    x = np.sort(np.array(ints, dtype=np.float64)) / 16.0
    f0 = riesz_force(x, params(x.size))
    f1 = riesz_force(x + float(c), params(x.size))
    np.testing.assert_array_equal(f0, f1)


@settings(max_examples=60, deadline=None)
@given(ordered_configs, st.sampled_from([1.0, 1.5, 2.0]),
       st.sampled_from([0.5, 2.0, 4.0]))
def test_force_dilation(ints, alpha, c):
    x = np.sort(np.array(ints, dtype=np.float64)) / 16.0
    f0 = riesz_force(x, params(x.size, alpha=alpha))
    f1 = riesz_force(c * x, params(x.size, alpha=alpha))
    np.testing.assert_allclose(f1, f0 * c ** (-alpha), rtol=1e-12,
                               atol=1e-12)


def test_force_kernel_tiling_matches_direct_sum():
    rng = np.random.default_rng(3)
    x = np.sort(rng.normal(0, 1, 400))
    for alpha in (1.0, 1.5, 2.0, 2.7):
        tiled = ForceKernel(400, alpha)(x)
        d = x[:, None] - x[None, :]
        np.fill_diagonal(d, np.inf)
        direct = np.sum(np.sign(d) / np.abs(d) ** alpha, axis=1) / 400
        np.testing.assert_allclose(tiled, direct, rtol=1e-12, atol=1e-13)


def test_raw_force_vector_has_no_mean_field_factor():
    x = np.array([0.5, 1.0])
    np.testing.assert_allclose(raw_force_vector(x), [-2.0, 2.0], atol=1e-14)
    f = riesz_force(x, params(2))
    np.testing.assert_allclose(raw_force_vector(x), f * 2.0, atol=1e-14)


# -- energies and statistics -------------------------------------------------

def test_energy_examples():
    assert energy_H_alpha(np.array([0.0, 1.0]), params(2)) == pytest.approx(
        0.5, abs=1e-14)
    assert energy_H_alpha(np.array([-1.0, 1.0]),
                          params(2, alpha=2.0)) == pytest.approx(1.25,
                                                                 abs=1e-14)
    assert energy_H_alpha(np.array([2.0]), params(1)) == pytest.approx(
        2.0, abs=1e-15)


def test_energy_diverges_as_gap_closes():
    tight = energy_H_alpha(np.array([0.0, 1e-8]), params(2))
    loose = energy_H_alpha(np.array([0.0, 1e-2]), params(2))
    assert tight > loose + 1.0


def test_lyapunov_examples():
    assert lyapunov_Hcal(np.array([0.0, 1.0])) == pytest.approx(0.5,
                                                                abs=1e-14)
    assert lyapunov_Hcal(np.zeros(7)) == 0.0
    assert lyapunov_Hcal(np.array([-1.0, 1.0])) == pytest.approx(1.0,
                                                                 abs=1e-14)


def test_lyapunov_lower_bound_10k_random_configs():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        n = int(rng.integers(1, 65))
        x = rng.normal(0.0, rng.uniform(0.1, 4.0), n)
        assert lyapunov_Hcal(x) >= 0.5 * float(np.dot(x, x)) - n


def test_interaction_stat_examples():
    assert weighted_interaction_stat(np.array([0.0, 1.0]),
                                     1.0) == pytest.approx(0.25, abs=1e-15)
    assert weighted_interaction_stat(np.array([5.0]), 1.0) == 0.0
    got = weighted_interaction_stat(np.array([0.0, 1.0, 2.0]), 1.0)
    assert got == pytest.approx(1.0 / 3.0, abs=1e-14)


def test_pair_power_examples():
    assert pair_power_stat(np.array([0.0, 1.0, 2.0, 3.0]),
                           0.0) == pytest.approx(0.75, abs=1e-15)
    assert pair_power_stat(np.array([0.0, 1.0, 2.0]),
                           1.0) == pytest.approx(5.0 / 9.0, abs=1e-14)
    assert pair_power_stat(np.array([1.0]), 2.0) == 0.0
    with pytest.raises(ValueError):
        pair_power_stat(np.array([0.0, 1.0]), -1.0)


# -- explicit constants -------------------------------------------------------

def test_c_alpha_n_table_values():
    assert c_alpha_n(1.0, 5) == pytest.approx(2.0, abs=1e-15)
    assert c_alpha_n(1.5, 8) == pytest.approx(16.0, abs=1e-12)
    assert c_alpha_n(3.0, 4) == pytest.approx(32.0, abs=1e-12)
    assert c_alpha_n(2.0, 4) == pytest.approx(8.0 * math.log(4.0), abs=1e-12)
    with pytest.raises(ValueError):
        c_alpha_n(2.0, 1)
    with pytest.raises(ValueError):
        c_alpha_n(0.9, 4)


def test_series_bound_examples():
    s = series_bound_check(1.5, 4)
    assert s.partial_sum == pytest.approx(
        1.0 + 1.0 / math.sqrt(2.0) + 1.0 / math.sqrt(3.0) + 0.5, abs=1e-12)
    assert s.partial_sum == pytest.approx(2.78446, abs=5e-6)
    assert s.bound == pytest.approx(4.0, abs=1e-12) and s.holds

    s = series_bound_check(1.0, 7)
    assert s.partial_sum == pytest.approx(7.0, abs=1e-12)
    assert s.bound == pytest.approx(7.0, abs=1e-12) and s.holds

    # stated alpha = 2 ceiling fails at N = 2; the proof's 1 + ln N holds
    s = series_bound_check(2.0, 2)
    assert s.partial_sum == pytest.approx(1.5, abs=1e-15)
    assert s.bound == pytest.approx(2.0 * math.log(2.0), abs=1e-12)
    assert not s.holds
    assert s.partial_sum <= 1.0 + math.log(2.0)


def test_series_bound_grid():
    # cumulative sums give every N at once per alpha
    n_max = 10_000
    i = np.arange(1, n_max + 1, dtype=np.float64)
    ns = np.arange(1, n_max + 1, dtype=np.float64)
    for alpha in (1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0):
        partial = np.cumsum(i ** (1.0 - alpha))
        if alpha < 2.0:
            bound = ns ** (2.0 - alpha) / (2.0 - alpha)
        elif alpha == 2.0:
            bound = 2.0 * np.log(ns)
        else:
            bound = np.full_like(ns, 1.0 + 1.0 / (alpha - 2.0))
        lo = 3 if alpha == 2.0 else 2  # stated alpha=2 ceiling starts at N=3
        sel = slice(lo - 1, None)
        assert np.all(partial[sel] <= bound[sel] + 1e-12)
        # proof-version ceiling for alpha = 2 covers N >= 2 as well
        if alpha == 2.0:
            assert np.all(partial[1:] <= 1.0 + np.log(ns[1:]) + 1e-12)
    # the vectorized oracle agrees with the scalar function on a subsample
    for alpha in (1.25, 2.0, 3.0):
        for n in (3, 10, 100, 10_000):
            got = series_bound_check(alpha, n)
            want = float(np.sum(np.arange(1, n + 1) ** (1.0 - alpha)))
            assert got.partial_sum == pytest.approx(want, rel=1e-12)


def test_grid_force_norm_small_cases():
    assert grid_force_norm(2) == pytest.approx(2.0 * math.sqrt(2.0),
                                               abs=1e-12)
    assert grid_force_norm(3) == pytest.approx(4.5 * math.sqrt(2.0),
                                               abs=1e-12)
    with pytest.raises(ValueError):
        grid_force_norm(1)


def test_grid_force_norm_monotone_doubling():
    for n in range(2, 65):
        assert grid_force_norm(2 * n) > grid_force_norm(n)


def test_grid_force_ratio_ceiling_to_1e5():
    ratios = grid_force_ratios(100_000)
    assert float(ratios.max()) <= 2.5
    # asymptote approaches sqrt(pi^2 / 3) ~ 1.814 from below
    assert 1.7 < ratios[-1] < 1.82
    # the sweep agrees with the direct norm
    for n in (2, 3, 17, 1000):
        assert ratios[n - 2] == pytest.approx(
            grid_force_norm(n) / n ** 1.5, rel=1e-9)


def test_fourth_moment_generator_inequality_10k():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        n = int(rng.integers(1, 65))
        x = np.sort(rng.normal(0.0, 2.0, n))
        while n > 1 and np.any(np.diff(x) <= 0.0):
            x = np.sort(rng.normal(0.0, 2.0, n))
        lam = float(rng.uniform(0.3, 3.0))
        sig = float(rng.uniform(0.0, 1.0))
        lphi = fourth_moment_generator_drift(x, lam, sig)
        phi = float(np.mean(x ** 4))
        assert lphi <= 9.0 * (2.0 * sig + 1.0) ** 2 / (2.0 * lam) \
            - 2.0 * lam * phi + 1e-9


def test_confinement_uprime():
    q = QuadraticConfinement(2.0)
    np.testing.assert_allclose(q.uprime(np.array([1.0, -3.0])), [2.0, -6.0])
    with pytest.raises(ValueError):
        QuadraticConfinement(0.0)
    with pytest.raises(ValueError):
        LipschitzConfinement(np.tanh, -1.0)
