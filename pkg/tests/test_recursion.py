import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import kestenlab as kl
from kestenlab.env_models import ConfigurationError
from kestenlab.recursion import (NonContractionError, TrajectoryOverflowError,
                                 forward_burn_in)
from kestenlab.rng import substream

BETA_SCALAR = -math.log(2.0) / 3.0  # (1/3) log 2 + (2/3) log (1/2)


def constant_env(matrix, vector):
    return kl.Environment(dim=len(vector), matrix_law=kl.ConstantMatrix(matrix),
                          vector_law=kl.ConstantVector(vector))


# ---------------------------------------------------------------------------
# forward iteration
# ---------------------------------------------------------------------------

def test_forward_zero_matrix_freezes_at_q():
    env = constant_env(((0.0, 0.0), (0.0, 0.0)), (2.0, -1.0))
    paths = kl.iterate_forward(env, kl.PathConfig(n_steps=5, start_x=(9.0, 9.0),
                                                  replicas=3, seed=1))
    q = np.array([2.0, -1.0])
    for k in range(1, 6):
        assert np.array_equal(paths.states[:, k], np.broadcast_to(q, (3, 2)))
        assert np.array_equal(paths.sums[:, k], np.broadcast_to(k * q, (3, 2)))


def test_forward_geometric_contraction():
    env = constant_env(((0.5, 0.0), (0.0, 0.5)), (1.0, 0.0))
    paths = kl.iterate_forward(env, kl.PathConfig(n_steps=30, start_x=(0.0, 0.0), seed=2))
    for n in (1, 5, 30):
        expected = (2.0 - 2.0 ** (1 - n))
        assert paths.states[0, n, 0] == pytest.approx(expected, abs=1e-12)
        assert paths.states[0, n, 1] == 0.0


def test_forward_replay_is_bit_identical(scalar_env):
    cfg = kl.PathConfig(n_steps=64, start_x=(0.5,), replicas=7, seed=3)
    a = kl.iterate_forward(scalar_env, cfg)
    b = kl.iterate_forward(scalar_env, cfg)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.sums, b.sums)


def test_forward_overflow_aborts():
    env = constant_env(((2.0, 0.0), (0.0, 2.0)), (1.0, 0.0))
    with pytest.raises(TrajectoryOverflowError):
        kl.iterate_forward(env, kl.PathConfig(n_steps=1200, start_x=(1.0, 0.0), seed=4))


def test_forward_matches_stationary_law(scalar_env):
    """Forward chain at n = 200 vs the backward-series sampler: same law."""
    n = 200
    paths = kl.iterate_forward(scalar_env, kl.PathConfig(
        n_steps=n, start_x=(0.0,), replicas=100_000, seed=5))
    forward_final = paths.states[:, n, 0]
    backward = kl.sample_stationary(scalar_env, kl.SeriesConfig(truncation=n, seed=6),
                                    100_000)
    ks = stats.ks_2samp(forward_final, backward.data[:, 0]).statistic
    assert ks < 0.02


# ---------------------------------------------------------------------------
# stationary sampling
# ---------------------------------------------------------------------------

def test_series_zero_matrix_collapses_to_first_q():
    env = kl.Environment(dim=1, matrix_law=kl.ConstantMatrix(((0.0,),)),
                         vector_law=kl.TwoPointVector((1.0,), (-2.0,), 0.5))
    for truncation in (1, 7):
        batch = kl.sample_stationary(env, kl.SeriesConfig(truncation=truncation, seed=7), 64)
        direct = kl.sample_q(env, substream(7, 0), 64)
        assert np.array_equal(batch.data, direct)


def test_series_geometric_truncation_error():
    env = constant_env(((0.5, 0.0), (0.0, 0.5)), (1.0, 0.0))
    limit = np.array([2.0, 0.0])
    errors = []
    for n in (2, 4, 8, 16):
        batch = kl.sample_stationary(env, kl.SeriesConfig(truncation=n, seed=8), 1)
        err = np.linalg.norm(batch.data[0] - limit)
        assert err <= 2.0 ** (1 - n) + 1e-12
        errors.append(err)
    assert all(a > b for a, b in zip(errors, errors[1:]))


def test_series_symmetric_mean_is_centered(scalar_env):
    batch = kl.sample_stationary(scalar_env, kl.SeriesConfig(tolerance=1e-9, seed=9),
                                 1_000_000)
    x = batch.data[:, 0]
    se = float(np.std(x) / math.sqrt(len(x)))
    assert abs(float(np.mean(x))) <= 3 * se


def test_series_adaptive_depth_recorded(scalar_env):
    batch = kl.sample_stationary(scalar_env, kl.SeriesConfig(tolerance=1e-6, seed=10), 5000)
    deep = kl.sample_stationary(scalar_env, kl.SeriesConfig(tolerance=1e-12, seed=10), 5000)
    assert batch.info["truncation"] < deep.info["truncation"]
    assert 1 <= batch.info["mean_depth"] <= batch.info["truncation"]


def test_series_noncontraction_error():
    env = constant_env(((2.0, 0.0), (0.0, 2.0)), (1.0, 0.0))
    with pytest.raises(NonContractionError):
        kl.sample_stationary(env, kl.SeriesConfig(tolerance=1e-9, seed=11, max_terms=500), 8)


def test_series_thread_count_does_not_change_draws(scalar_env):
    cfg = kl.SeriesConfig(tolerance=1e-9, seed=12)
    a = kl.sample_stationary(scalar_env, cfg, 300_000, threads=1)
    b = kl.sample_stationary(scalar_env, cfg, 300_000, threads=4)
    assert np.array_equal(a.data, b.data)


def test_series_config_validation():
    with pytest.raises(ConfigurationError):
        kl.SeriesConfig()
    with pytest.raises(ConfigurationError):
        kl.SeriesConfig(truncation=5, tolerance=1e-9)
    with pytest.raises(ConfigurationError):
        kl.SeriesConfig(tolerance=-1.0)


# ---------------------------------------------------------------------------
# Lyapunov exponent
# ---------------------------------------------------------------------------

def test_lyapunov_exact_for_similarity():
    env = kl.Environment(dim=2, matrix_law=kl.Similarity(2, (0.7,), (1.0,)),
                         vector_law=kl.GaussianVector(2))
    est = kl.lyapunov(env, 400, 3, substream(13))
    assert est.beta == pytest.approx(math.log(0.7), abs=1e-6)
    assert est.contractive


def test_lyapunov_scalar_benchmark(scalar_env):
    est = kl.lyapunov(scalar_env, 10_000, 100, substream(14))
    assert abs(est.beta - BETA_SCALAR) <= 3 * est.std_error


def test_lyapunov_flags_expansion():
    env = constant_env(((2.0, 0.0), (0.0, 2.0)), (0.0, 0.0))
    est = kl.lyapunov(env, 200, 2, substream(15))
    assert est.beta == pytest.approx(math.log(2.0), abs=1e-9)
    assert not est.contractive


def test_lyapunov_consistent_when_doubling(scalar_env):
    a = kl.lyapunov(scalar_env, 4000, 50, substream(16))
    b = kl.lyapunov(scalar_env, 8000, 50, substream(17))
    combined = math.hypot(a.std_error, b.std_error)
    assert abs(a.beta - b.beta) <= 3 * combined


def test_lyapunov_preconditions(scalar_env):
    with pytest.raises(ConfigurationError):
        kl.lyapunov(scalar_env, 50, 10, substream(18))


def test_forward_burn_in():
    assert forward_burn_in(-0.25) == 40
    with pytest.raises(ConfigurationError):
        forward_burn_in(0.1)


# ---------------------------------------------------------------------------
# partial sums
# ---------------------------------------------------------------------------

def test_birkhoff_degenerate_sum():
    env = constant_env(((0.0,),), (3.0,))
    batch = kl.birkhoff_sums(env, kl.PathConfig(n_steps=11, start_x=(5.0,),
                                                replicas=4, seed=19))
    assert np.array_equal(batch.data, np.full((4, 1), 33.0))


def test_birkhoff_single_step_matches_pair(scalar_env):
    cfg = kl.PathConfig(n_steps=1, start_x=(0.7,), replicas=16, seed=20)
    batch = kl.birkhoff_sums(scalar_env, cfg)
    m, q = kl.sample_pairs(scalar_env, substream(20), 16)
    expected = m[:, 0, 0] * 0.7 + q[:, 0]
    assert np.allclose(batch.data[:, 0], expected, atol=0.0)


def test_birkhoff_matches_forward_paths(scalar_env):
    cfg = kl.PathConfig(n_steps=50, start_x=(0.0,), replicas=25, seed=21)
    batch = kl.birkhoff_sums(scalar_env, cfg)
    paths = kl.iterate_forward(scalar_env, cfg)
    assert np.array_equal(batch.data, paths.sums[:, -1])


def test_birkhoff_symmetric_sums_have_centered_median(scalar_env):
    # law(S_n) is symmetric for every n, so the median of S_n / n is 0;
    # the sign counts give a distribution-free check of that
    for n in (64, 512):
        batch = kl.birkhoff_sums(scalar_env, kl.PathConfig(
            n_steps=n, start_x=(0.0,), replicas=4000, seed=22))
        positive = int(np.sum(batch.data[:, 0] > 0))
        assert abs(positive - 2000) <= 3 * math.sqrt(4000 * 0.25)


@given(st.floats(min_value=-3.0, max_value=3.0),
       st.integers(min_value=1, max_value=12))
@settings(max_examples=20, deadline=None)
def test_degenerate_recursion_property(q, n):
    env = constant_env(((0.0,),), (q,))
    paths = kl.iterate_forward(env, kl.PathConfig(n_steps=n, start_x=(1.0,), seed=23))
    assert paths.states[0, n, 0] == q
    assert paths.sums[0, n, 0] == pytest.approx(n * q, rel=1e-15, abs=1e-12)
