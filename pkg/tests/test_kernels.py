"""Numba and numpy kernels agree, and MAS matches exhaustive search."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atytts import _accel, kernels


def brute_force_durations(cost):
    """Enumerate every composition of T into L positive parts; lowest cost wins."""
    L, T = cost.shape
    best, best_d = None, None
    for cuts in itertools.combinations(range(1, T), L - 1):
        bounds = (0,) + cuts + (T,)
        d = np.diff(bounds)
        total = sum(cost[i, bounds[i]:bounds[i + 1]].sum() for i in range(L))
        if best is None or total < best - 1e-12:
            best, best_d = total, d
    return best_d, best


def path_cost(cost, d):
    owner = np.repeat(np.arange(len(d)), d)
    return cost[owner, np.arange(cost.shape[1])].sum()


@pytest.mark.parametrize("L,T", [(1, 1), (1, 5), (3, 3), (2, 7), (4, 8)])
def test_numba_and_numpy_mas_agree_on_random_costs(L, T):
    rng = np.random.default_rng(L * 10 + T)
    for _ in range(50):
        cost = rng.random((L, T))
        a = kernels._maximum_path_nb(cost)
        b = kernels._maximum_path_np(cost)
        np.testing.assert_array_equal(a, b)


def test_mas_optimal_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        L = int(rng.integers(1, 5))
        T = int(rng.integers(L, 9))
        cost = rng.random((L, T))
        d = kernels.maximum_path(cost)
        ref, best = brute_force_durations(cost)
        assert d.sum() == T and np.all(d >= 1)
        assert path_cost(cost, d) == pytest.approx(best, abs=1e-12)
        np.testing.assert_array_equal(d, ref)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(6, 20)),
              elements=st.floats(0, 100, allow_nan=False)))
@settings(max_examples=60, deadline=None)
def test_mas_structural_properties(cost):
    d = kernels.maximum_path(cost)
    assert d.dtype == np.int64
    assert len(d) == cost.shape[0] and d.sum() == cost.shape[1] and d.min() >= 1
    np.testing.assert_array_equal(d, kernels._maximum_path_np(cost))


def test_mas_rejects_impossible_shapes():
    with pytest.raises(ValueError):
        kernels.maximum_path(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        kernels.maximum_path(np.zeros((0, 2)))


def test_harmonic_stack_variants_agree():
    rng = np.random.default_rng(1)
    hop, sr, T = 256, 22050, 20
    f0 = np.interp(np.arange(T * hop), [0, T * hop], [110.0, 180.0])
    amps = rng.random((T, 30))
    a = kernels._harmonic_stack_nb(f0, amps, hop, float(sr))
    b = kernels._harmonic_stack_np(f0, amps, hop, float(sr))
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_harmonic_stack_single_harmonic_is_a_sine():
    hop, sr, T = 256, 22050, 8
    f0 = np.full(T * hop, 440.0)
    out = kernels.harmonic_stack(f0, np.ones((T, 1)), hop, sr)
    n = np.arange(1, T * hop + 1)
    np.testing.assert_allclose(out, np.sin(2 * np.pi * 440.0 * n / sr), atol=1e-9)


def test_overlap_add_variants_agree_and_window_power():
    rng = np.random.default_rng(2)
    frames = rng.standard_normal((6, 16))
    window = np.hanning(16)
    a, na = kernels._overlap_add_nb(frames, window, 4)
    b, nb = kernels._overlap_add_np(frames, window, 4)
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(na, nb, atol=1e-12)
    assert len(a) == 5 * 4 + 16


def test_env_flag_is_read():
    assert isinstance(_accel.USE_NUMBA, bool)
    assert _accel.USE_NUMBA == (_accel.HAS_NUMBA and _accel._FLAG not in ("1", "true", "yes", "on"))
