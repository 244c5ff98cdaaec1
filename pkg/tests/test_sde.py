import numpy as np
import pytest

from conftest import GRID, const_path, custom_problem, make_problem, ones_s, zeros_b, zeros_s
from meanviab import rng
from meanviab.errors import ConfigError, DomainError, SimulationError, StructuralError
from meanviab.paths import Path
from meanviab.sde import (ControlProcess, PerturbationProcess, integrate, loglog_slope, moment_bound_check,
                          simulate_controlled, simulate_frozen_shifted, simulate_perturbed, terminal_values)

A0 = ControlProcess.constant(0.0)


def unit_drift(t, x, a):
    return np.ones((np.shape(a)[0], 1))


def test_degenerate_dynamics_keep_paths_constant():
    spec = custom_problem(zeros_b, zeros_s)
    res = simulate_controlled(spec, 0.25, const_path(0.7), A0, 50, 1)
    assert np.all(res.ensemble.values == 0.7)


def test_unit_drift_moves_state_by_one():
    spec = custom_problem(unit_drift, zeros_s)
    X = simulate_controlled(spec, 0.0, const_path(0.2), A0, 20, 1).ensemble.values
    np.testing.assert_allclose(X[:, -1, 0], 1.2, rtol=0, atol=1e-12)


def test_brownian_endpoint_moments():
    spec = custom_problem(zeros_b, ones_s)
    X = simulate_controlled(spec, 0.0, const_path(0.0), A0, 100000, 4).ensemble.values[:, -1, 0]
    assert abs(X.mean()) <= 3 / np.sqrt(1e5)
    assert X.var() == pytest.approx(1.0, rel=0.05)


def test_constant_coefficients_have_no_scheme_error():
    spec = custom_problem(zeros_b, lambda t, x, a: np.full((len(a), 1, 1), 0.7))
    res = simulate_controlled(spec, 0.25, const_path(0.1), A0, 100, 2)
    k0 = GRID.index(0.25)
    X, W = res.ensemble.values, res.driving_noise.values
    np.testing.assert_allclose(X[:, k0:] - 0.1, 0.7 * (W[:, k0:] - W[:, k0:k0 + 1]), atol=1e-12)


def test_pure_perturbation_drift():
    spec = custom_problem(zeros_b, zeros_s)
    pert = PerturbationProcess.constant(GRID, [1.0], [[0.0]], 0.25, 0.5)
    X = simulate_perturbed(spec, 0.25, const_path(0.0), A0, pert, 0.25, 10, 1).ensemble.values
    np.testing.assert_allclose(X[:, -1, 0], 0.25, atol=1e-12)


def test_frozen_controlled_drift_mean():
    spec = make_problem()
    a = ControlProcess.constant(0.5)
    res = simulate_perturbed(spec, 0.25, const_path(0.0), a, PerturbationProcess.zero(GRID, 1), 0.5, 40000, 3)
    end = res.ensemble.values[:, GRID.index(0.75), 0]
    assert abs(end.mean() - 0.25) <= 3 * end.std() / np.sqrt(end.size)


def test_frozen_shift_matches_plain_simulation_for_open_loop_control():
    spec = make_problem()
    a = ControlProcess.constant(0.3)
    ring = Path(GRID, np.linspace(0, 1, GRID.size))
    plain = simulate_controlled(spec, 0.25, const_path(0.0), a, 100, 5).ensemble.values
    shifted = simulate_frozen_shifted(spec, 0.25, const_path(0.0), ring, a, 100, 5).ensemble.values
    np.testing.assert_array_equal(plain, shifted)


def _clamp_at(t0):
    k0 = GRID.index(t0)
    return ControlProcess("feedback", rule=lambda t, x: np.clip(x[:, k0, 0], 0, 1), activation_time=t0)


def test_splice_reads_ring_path_before_t():
    spec = make_problem()
    res = simulate_frozen_shifted(spec, 0.5, const_path(0.0), const_path(0.7), _clamp_at(0.5), 50, 6)
    # drift b = a = 0.7 on every path after t, so X_T - W_T + W_t = 0.7 * 0.5
    k0 = GRID.index(0.5)
    X, W = res.ensemble.values, res.driving_noise.values
    np.testing.assert_allclose(X[:, -1, 0] - (W[:, -1, 0] - W[:, k0, 0]), 0.35, atol=1e-12)


def test_splice_ignores_ring_values_after_t():
    spec = make_problem()
    ring1 = Path(GRID, np.r_[np.full(65, 0.4), np.full(64, 0.9)])
    ring2 = Path(GRID, np.r_[np.full(65, 0.4), np.full(64, -3.0)])
    ctrl = _clamp_at(0.25)
    a = simulate_frozen_shifted(spec, 0.5, const_path(0.0), ring1, ctrl, 30, 7).ensemble.values
    b = simulate_frozen_shifted(spec, 0.5, const_path(0.0), ring2, ctrl, 30, 7).ensemble.values
    np.testing.assert_array_equal(a, b)


def test_paths_agreeing_before_t_give_same_future():
    spec = make_problem("sine")
    x1 = Path(GRID, np.r_[np.linspace(0, 1, 33), np.zeros(96)])
    x2 = Path(GRID, np.r_[np.linspace(0, 1, 33), np.ones(96)])
    a = simulate_controlled(spec, 0.25, x1, ControlProcess.constant(0.5), 40, 8).ensemble.values
    b = simulate_controlled(spec, 0.25, x2, ControlProcess.constant(0.5), 40, 8).ensemble.values
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("threads", [4, 8])
def test_simulation_is_independent_of_thread_count(threads):
    spec = make_problem("sine", {"sigma_amp": 0.5})
    ref = simulate_controlled(spec, 0.0, const_path(0.1), ControlProcess.constant(0.2), 20000, 9).ensemble.values
    rng.set_threads(threads)
    try:
        got = simulate_controlled(spec, 0.0, const_path(0.1), ControlProcess.constant(0.2), 20000,
                                  9).ensemble.values
    finally:
        rng.set_threads(1)
    assert got.tobytes() == ref.tobytes()


def test_non_finite_state_reports_step_index():
    spec = custom_problem(lambda t, x, a: np.full((len(a), 1), np.inf if t >= 0.5 else 0.0), zeros_s)
    with pytest.raises(SimulationError) as err:
        simulate_controlled(spec, 0.0, const_path(1.0), A0, 4, 1)
    assert err.value.step_index == GRID.index(0.5) + 1


def test_invalid_inputs():
    spec = make_problem()
    with pytest.raises(ConfigError):
        simulate_controlled(spec, 0.0, const_path(0.0), A0, 0, 1)
    with pytest.raises(DomainError):
        simulate_controlled(spec, 0.0, const_path(0.0), ControlProcess.constant(2.0), 4, 1)
    with pytest.raises(DomainError):
        simulate_controlled(spec, 1.0, const_path(0.0), A0, 4, 1)
    with pytest.raises(StructuralError):
        integrate(spec, 0.0, np.zeros((3, GRID.size, 2)), A0, 3, 1)


def test_perturbation_before_activation_is_rejected():
    p = np.zeros((GRID.num_steps, 1))
    p[0] = 1.0
    pert = PerturbationProcess(p, np.zeros((GRID.num_steps, 1, 1)), 0.5)
    with pytest.raises(StructuralError):
        simulate_perturbed(make_problem(), 0.5, const_path(0.0), A0, pert, 0.25, 4, 1)


def test_energy_of_constant_perturbation():
    pert = PerturbationProcess.constant(GRID, [0.3], [[0.4]], 0.25, 0.5)
    assert pert.energy(GRID, 0.25, 0.5) == pytest.approx(0.25 * 0.25)


def test_moment_check_deterministic_drift_has_slope_two():
    spec = custom_problem(lambda t, x, a: np.full((len(a), 1), 0.5), zeros_s)
    rep = moment_bound_check(spec, 0.0, const_path(0.0), [4 / 128, 8 / 128, 16 / 128], 10, 1)
    assert rep["slope"] == pytest.approx(2.0, abs=1e-9)
    assert rep["passed"] is None
    np.testing.assert_allclose(rep["moments"], 0.25 * np.square(rep["deltas"]), rtol=1e-9)


def test_moment_check_zero_dynamics():
    rep = moment_bound_check(custom_problem(zeros_b, zeros_s), 0.0, const_path(0.0), [0.125, 0.25], 10, 1)
    assert rep["moments"] == [0.0, 0.0]


def test_moment_check_brownian_slope_is_one():
    rep = moment_bound_check(make_problem(), 0.0, const_path(0.0), [4 / 128, 8 / 128, 16 / 128, 32 / 128],
                             20000, 2)
    assert rep["passed"]
    assert 0.8 <= rep["slope"] <= 1.2


def test_terminal_values_report_clips():
    spec = make_problem(bound=0.5)
    vals, clips = terminal_values(spec, 0.0, const_path(0.0), A0, 2000, 1)
    assert clips > 0
    assert np.all(np.abs(vals) <= 0.5)


def test_loglog_slope_of_power_law():
    xs = np.array([0.1, 0.2, 0.4])
    assert loglog_slope(xs, 3 * xs**1.5) == pytest.approx(1.5)
    assert np.isnan(loglog_slope(xs, np.zeros(3)))


def test_simulation_files_round_trip(tmp_path):
    res = simulate_controlled(make_problem(), 0.0, const_path(0.0), A0, 3, 1)
    meta = res.write(tmp_path)
    assert meta["scheme"] == "euler-maruyama"
    table = np.loadtxt(tmp_path / "simulation.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(table[:, 2].reshape(3, GRID.size), res.ensemble.values[:, :, 0])
