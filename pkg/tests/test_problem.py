import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import GRID, LINEAR_CANDIDATE, custom_problem, cylinder, make_problem, ones_s
from meanviab.errors import ConfigError, DomainError, StructuralError
from meanviab.paths import TimeGrid
from meanviab.problem import (CandidateFunction, ControlSpace, ProblemSpec, TargetSet, check_A1_nonanticipativity,
                              check_A2, check_H)


def test_state_independent_coefficients_have_zero_lipschitz_ratio():
    # the magnitude bound sums |b| + |sigma| + |h|, so b = a, sigma = 1 needs L_b >= 2 + clip level
    rep = check_A2(make_problem(L_b=12.0), samples=400)
    assert rep.passed
    assert rep.stats["max_lipschitz_ratio"] == 0.0


def test_bound_violation_is_reported_with_witness():
    rep = check_A2(make_problem(params={"drift_offset": 2.0}, L_b=1.0, cost="constant", bound=0.0), samples=400)
    assert not rep.passed
    assert rep.witness["kind"] == "bound"
    assert rep.witness["value"] >= 2.0


def test_sine_drift_has_lipschitz_ratio_at_most_one():
    rep = check_A2(make_problem("sine", {"amp": 1.0}, L_b=12.0), samples=2000)
    assert rep.passed
    assert 0.5 < rep.stats["max_lipschitz_ratio"] <= 1.0


def test_steep_drift_fails_lipschitz_check():
    rep = check_A2(make_problem("sine", {"amp": 30.0}, L_b=12.0, cost="constant", bound=0.0), samples=2000)
    assert not rep.passed
    assert rep.witness["kind"] in ("lipschitz", "bound")


def test_constant_candidate_passes_H():
    cand = CandidateFunction(lambda t, x: np.full(x.shape[0], 2.0), 1.0, 2.0, GRID)
    rep = check_H(cand, GRID, samples=400)
    assert rep.passed
    assert rep.stats["max_space_ratio"] == 0.0 and rep.stats["max_time_ratio"] == 0.0


def test_state_candidate_passes_H_with_unit_constant():
    rep = check_H(cylinder(lambda t, x: x, lower=-np.inf), GRID, samples=2000)
    assert rep.passed
    assert rep.stats["max_space_ratio"] <= 1.0


def test_scaled_candidate_fails_H_with_witness_ratio_ten():
    rep = check_H(cylinder(lambda t, x: 10 * x, lower=-np.inf), GRID, samples=2000)
    assert not rep.passed
    assert rep.witness["kind"] == "space"
    assert rep.witness["value"] == pytest.approx(10.0, rel=1e-6)


def test_time_irregular_candidate_fails_H():
    # v = x_t + 5 sqrt(t) grows faster than the Hoelder-1/2 allowance near t = 0
    rep = check_H(cylinder(lambda t, x: x + 5 * np.sqrt(t), lower=-np.inf), GRID, samples=2000)
    assert not rep.passed


def test_A1_passes_for_current_state_coefficients():
    assert check_A1_nonanticipativity(make_problem("sine")).passed


def test_A1_detects_coefficient_reading_the_future():
    half = GRID.num_steps // 2

    def b(t, x, a):
        return x[:, half]  # the value at T/2, whatever t is

    rep = check_A1_nonanticipativity(custom_problem(b, ones_s))
    assert not rep.passed
    assert rep.witness["function"] == "drift"


def test_A1_terminal_cost_ignores_tails_after_T():
    rep = check_A1_nonanticipativity(make_problem(cost="linear"))
    assert rep.passed


def test_A1_detects_terminal_cost_reading_past_T():
    rep = check_A1_nonanticipativity(custom_problem(lambda t, x, a: np.zeros((len(a), 1)), ones_s,
                                                    h=lambda x: x[:, -1, 0]))
    assert not rep.passed
    assert rep.witness["function"] == "terminal_cost"


def test_coefficients_vanish_after_horizon():
    spec = make_problem()
    x = np.zeros((3, GRID.size, 1))
    assert np.all(spec.coefficients.drift(1.0 + 2 * GRID.step, x, np.ones(3)) == 0)


def test_problem_json_round_trip():
    spec = make_problem()
    again = ProblemSpec.from_json(json.dumps(spec.to_dict()))
    assert again.to_dict() == spec.to_dict()


def test_missing_field_names_the_field():
    with pytest.raises(ConfigError) as err:
        ProblemSpec.from_dict({"terminal_cost": {"family": "linear", "bound": 1.0}})
    assert err.value.field == "coefficients"


def test_unknown_family_is_config_error():
    with pytest.raises(ConfigError) as err:
        make_problem(family="nope")
    assert err.value.field == "coefficients.family"


def test_control_space_outside_unit_interval_is_domain_error():
    with pytest.raises(DomainError):
        ControlSpace(-0.5, 1.0)


def test_candidate_on_another_grid_is_structural_error():
    other = CandidateFunction(lambda t, x: np.zeros(x.shape[0]), 1.0, 0.0, TimeGrid(1.0, 8))
    with pytest.raises(StructuralError):
        make_problem().with_candidate(other)


def test_target_set_distances():
    half = TargetSet()
    assert half.distance(0.5) == 0.5
    assert half.distance(-2.0) == 0.0
    assert TargetSet("closed_interval", 1.0, 2.0).distance(0.0) == 1.0


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_clipping_preserves_order(u, w):
    spec = make_problem(bound=10.0)
    x = np.zeros((2, GRID.size, 1))
    x[0, -1, 0], x[1, -1, 0] = u, w
    h, _ = spec.terminal_cost.evaluate(x)
    if u <= w:
        assert h[0] <= h[1]


def test_clip_counter_counts_clipped_values():
    spec = make_problem(bound=1.0)
    x = np.zeros((3, GRID.size, 1))
    x[:, -1, 0] = [0.5, 2.0, -3.0]
    h, clips = spec.terminal_cost.evaluate(x)
    assert clips == 2
    assert h.tolist() == [0.5, 1.0, -1.0]


def test_evaluators_are_referentially_transparent():
    spec = make_problem("sine")
    x = np.random.default_rng(0).normal(size=(5, GRID.size, 1))
    a = np.linspace(0, 1, 5)
    assert spec.coefficients.drift(0.3, x, a).tobytes() == spec.coefficients.drift(0.3, x, a).tobytes()


def test_shifted_candidate_adds_time_term():
    cand = make_problem(candidate=LINEAR_CANDIDATE).candidate.shifted(time_coef=0.5)
    x = np.full((1, GRID.size, 1), 0.3)
    assert cand(0.0, x)[0] == pytest.approx(0.8)
    assert cand(1.0, x)[0] == pytest.approx(0.3)
