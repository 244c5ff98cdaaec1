import numpy as np
import pytest

from meanviab.paths import Path, TimeGrid
from meanviab.problem import (AnchorTriple, CandidateFunction, Coefficients, ControlSpace, ProblemSpec,
                              TerminalCost)

GRID = TimeGrid(1.0, 128)

LINEAR_CANDIDATE = {"family": "linear", "params": {"clip": 10.0}, "declared_L": 1.0, "lower_bound": -10.0,
                    "upper_bound": 10.0}
SQUARE_CANDIDATE = {"family": "square", "params": {"clip": 100.0}, "declared_L": 20.0, "lower_bound": -100.0,
                    "upper_bound": 100.0}
CONSTANT_CANDIDATE = {"family": "constant", "params": {"value": 0.0}, "declared_L": 1.0, "lower_bound": 0.0,
                      "upper_bound": 0.0}


def make_problem(family="controlled_drift", params=None, L_b=12.0, candidate=LINEAR_CANDIDATE, A=(0.0, 1.0),
                 grid_points=11, cost="linear", cost_params=None, bound=10.0, num_steps=128):
    """A one-dimensional problem document built from the registered families."""
    doc = {
        "horizon": 1.0,
        "num_steps": num_steps,
        "coefficients": {"family": family, "params": params or {}, "declared_L_b": L_b},
        "terminal_cost": {"family": cost, "params": cost_params or {}, "bound": bound},
        "control_space": {"lower": A[0], "upper": A[1], "grid_points": grid_points},
        "anchor": {"a0": A[0]},
    }
    if candidate is not None:
        doc["candidate"] = candidate
    return ProblemSpec.from_dict(doc)


def custom_problem(b, s, L_b=10.0, h=None, bound=10.0, grid=GRID, A=(0.0, 1.0), candidate=None):
    """A one-dimensional problem from raw callables ``b(t, x, a)``, ``s(t, x, a)``, ``h(x)``."""
    h = h or (lambda x: x[:, grid.num_steps, 0])
    return ProblemSpec(grid, 1, ControlSpace(A[0], A[1], 11), Coefficients(b, s, L_b, grid, 1),
                       TerminalCost(h, bound, grid), AnchorTriple.zero(1, A[0]), candidate=candidate)


def cylinder(fn, L=1.0, lower=-10.0, upper=10.0, grid=GRID):
    """Candidate ``v(t, x) = fn(t, x_t)`` from a scalar function of the current state."""

    def v(t, x):
        k = min(grid.index(t), x.shape[1] - 1)
        return fn(t, x[:, k, 0])

    return CandidateFunction(v, L, lower, grid, upper)


@pytest.fixture
def grid():
    return GRID


@pytest.fixture
def b1():
    return make_problem()


@pytest.fixture
def x03():
    return Path.constant(GRID, 0.3)


def const_path(value, grid=GRID):
    return Path.constant(grid, value)


def zeros_b(t, x, a):
    return np.zeros((np.shape(a)[0], 1))


def zeros_s(t, x, a):
    return np.zeros((np.shape(a)[0], 1, 1))


def ones_s(t, x, a):
    return np.ones((np.shape(a)[0], 1, 1))


# one (criterion, passed, detail) row per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
