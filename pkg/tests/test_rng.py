import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meanviab import rng
from meanviab.errors import ConfigError


def test_increments_depend_only_on_path_index():
    a = rng.brownian_increments(8, 0.125, 1, 10000, 3, "W")
    b = rng.brownian_increments(8, 0.125, 1, 9000, 3, "W")
    np.testing.assert_array_equal(a[:9000], b)


def test_labels_give_independent_streams():
    a = rng.brownian_increments(4, 0.25, 1, 1000, 3, "W")
    b = rng.brownian_increments(4, 0.25, 1, 1000, 3, "other")
    assert not np.array_equal(a, b)
    assert abs(np.corrcoef(a.ravel(), b.ravel())[0, 1]) < 0.1


@pytest.mark.parametrize("threads", [1, 4, 8])
def test_output_is_independent_of_thread_count(threads):
    ref = rng.brownian_increments(16, 1 / 16, 2, 20000, 11, "W")
    rng.set_threads(threads)
    try:
        got = rng.brownian_increments(16, 1 / 16, 2, 20000, 11, "W")
    finally:
        rng.set_threads(1)
    assert got.tobytes() == ref.tobytes()


def test_antithetic_pairs_are_opposite():
    z = rng.brownian_increments(4, 0.25, 1, 100, 1, "W", antithetic=True)
    np.testing.assert_array_equal(z[0::2], -z[1::2])


def test_increment_variance_matches_step():
    z = rng.brownian_increments(32, 1 / 32, 1, 50000, 2, "W")
    assert z.var() == pytest.approx(1 / 32, rel=0.02)


@pytest.mark.parametrize("seed", [-1, 1.5, True])
def test_bad_seed_is_config_error(seed):
    with pytest.raises(ConfigError):
        rng.check_seed(seed)


def test_odd_antithetic_count_is_config_error():
    with pytest.raises(ConfigError):
        rng.brownian_increments(4, 0.25, 1, 3, 1, "W", antithetic=True)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=50))
def test_standard_error_is_non_negative(values):
    assert rng.pair_standard_error(np.array(values), False) >= 0.0
