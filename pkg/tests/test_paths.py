import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meanviab.errors import DomainError, StructuralError
from meanviab.paths import Path, PathEnsemble, TimeGrid, at, path_distance, running_sup_norm, stop_path

SMALL = TimeGrid(1.0, 16)
finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
path_values = arrays(np.float64, (SMALL.size, 1), elements=finite)
times = st.integers(0, SMALL.num_steps).map(SMALL.time)


def test_stop_constant_path_is_unchanged():
    x = Path.constant(SMALL, 1.5)
    assert stop_path(x, 0.4) == x


def test_stop_truncates_after_index():
    g = TimeGrid(3.0, 3)
    x = Path(g, np.array([0.0, 1.0, 2.0, 3.0]))
    assert stop_path(x, 1.0).values[:, 0].tolist() == [0.0, 1.0, 1.0, 1.0]


def test_stop_outside_horizon_is_domain_error():
    with pytest.raises(DomainError):
        stop_path(Path.constant(SMALL, 0.0), 1.5)


def test_distance_examples():
    x = Path.constant(SMALL, 0.2)
    assert path_distance(0.5, x, 0.5, x) == 0.0
    assert path_distance(0.5, x, 0.75, x) == pytest.approx(0.25)
    assert path_distance(0.5, Path.constant(SMALL, 0.0), 0.5, Path.constant(SMALL, 3.0)) == 3.0


def test_distance_grid_mismatch_is_structural_error():
    with pytest.raises(StructuralError):
        path_distance(0.0, Path.constant(SMALL, 0.0), 0.0, Path.constant(TimeGrid(1.0, 8), 0.0))


def test_index_rounds_half_up():
    g = TimeGrid(1.0, 4)
    assert g.index(0.125) == 1
    assert g.index(0.124) == 0
    assert g.floor_index(0.49) == 1
    assert g.snap(0.3) == 0.25


@given(path_values, times, times)
def test_stop_is_idempotent(v, s, t):
    x = Path(SMALL, v)
    lo, hi = min(s, t), max(s, t)
    assert stop_path(stop_path(x, lo), hi) == stop_path(x, lo)


@given(path_values, path_values, path_values, times, times, times)
@settings(max_examples=60)
def test_distance_is_symmetric_and_satisfies_triangle_inequality(a, b, c, s, t, u):
    x, y, z = Path(SMALL, a), Path(SMALL, b), Path(SMALL, c)
    assert path_distance(s, x, t, y) == pytest.approx(path_distance(t, y, s, x))
    assert path_distance(s, x, u, z) <= path_distance(s, x, t, y) + path_distance(t, y, u, z) + 1e-12


@given(path_values, path_values, times)
def test_stopping_is_non_expanding(a, b, t):
    x, y = Path(SMALL, a), Path(SMALL, b)
    assert path_distance(t, stop_path(x, t), t, stop_path(y, t)) <= path_distance(t, x, t, y) + 1e-12


@given(path_values, times)
def test_stop_never_reads_after_t(v, t):
    k = SMALL.index(t)
    poisoned = v.copy()
    poisoned[k + 1 :] = 1e6
    assert stop_path(Path(SMALL, v), t) == stop_path(Path(SMALL, poisoned), t)


def test_at_reads_stopped_prefix():
    x = np.arange(5.0).reshape(1, 5, 1)
    assert at(x[:, :3], 4)[0, 0] == 2.0


def test_running_sup_norm_is_monotone():
    x = np.array([[[1.0], [-3.0], [2.0]]])
    assert running_sup_norm(x)[0].tolist() == [1.0, 3.0, 3.0]


def test_path_csv_round_trip():
    x = Path(SMALL, np.linspace(-1, 1, SMALL.size))
    assert Path.from_csv(x.to_csv(), SMALL) == x


def test_ensemble_is_read_only_and_csv_is_long_format():
    ens = PathEnsemble(SMALL, np.zeros((2, SMALL.size, 1)))
    with pytest.raises(ValueError):
        ens.values[0, 0, 0] = 1.0
    lines = ens.to_csv().splitlines()
    assert lines[0] == "path,t,x1"
    assert len(lines) == 1 + 2 * SMALL.size


def test_path_rejects_wrong_shape_and_non_finite():
    with pytest.raises(StructuralError):
        Path(SMALL, np.zeros(3))
    with pytest.raises(DomainError):
        Path(SMALL, np.full(SMALL.size, np.nan))
