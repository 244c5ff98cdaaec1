"""
Mean quasi-tangency tests and Monte Carlo contingent epi/hypoderivatives.

A *direction* is the frozen coefficient pair ``(b, sigma)(., x_{.^t}, a)``
for a control ``a``.  A search *attempt* fixes a step ``delta`` on the grid,
a control index and a deterministic perturbation ``(p, q)``, simulates the
frozen-coefficient dynamics on ``[t, t + delta]`` and records the sample
mean of ``v(t + delta, X)``.  All attempts of one search share the same
driving noise (common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .errors import DomainError, PreconditionError, StructuralError
from .paths import Path, TimeGrid
from .problem import CandidateFunction, ProblemSpec, TargetSet
from .sde import ControlProcess, PerturbationProcess, draw_noise, integrate

# radius factor keeping the perturbation energy strictly inside the budget
RADIUS_MARGIN = 1.0 - 1e-9


@dataclass(frozen=True, eq=False)
class DirectionSet:
    """Frozen coefficient directions at ``(t, x)``.

    ``kind="E_plus"`` ranges over ``controls``; ``kind="E_plus_frozen_control"``
    holds a single control whose feedback reads the splice of ``ring_x``.
    """

    kind: str
    t: float
    x: Path
    controls: tuple
    ring_x: Optional[Path] = None

    def __post_init__(self):
        if self.kind not in ("E_plus", "E_plus_frozen_control"):
            raise DomainError(f"unknown direction kind {self.kind!r}")
        object.__setattr__(self, "controls", tuple(self.controls))
        if not self.controls:
            raise DomainError("direction set needs at least one control")
        if self.kind == "E_plus_frozen_control" and len(self.controls) != 1:
            raise StructuralError("the frozen-control direction set holds exactly one control")

    @classmethod
    def from_control_grid(cls, spec: ProblemSpec, t: float, x: Path, values=None) -> "DirectionSet":
        values = spec.control_space.points if values is None else values
        ctrls = [ControlProcess.constant(a, t, spec.anchor.a0) for a in values]
        return cls("E_plus", t, x, ctrls)

    @classmethod
    def frozen(cls, t: float, x: Path, control: ControlProcess, ring_x: Optional[Path] = None) -> "DirectionSet":
        return cls("E_plus_frozen_control", t, x, (control,), ring_x)

    def describe(self) -> dict:
        return {"kind": self.kind, "t": self.t, "controls": [c.describe() for c in self.controls]}


@dataclass(frozen=True)
class SearchConfig:
    """Deterministic search over ``(delta, control, p, q)``.

    ``pert_family`` is ``"coordinate"`` (zero, then ``+-r e_i`` and
    ``+-r E_ij`` with ``r`` at the budget) or ``"zero"``.
    """

    levels: int = 6
    pert_family: str = "coordinate"
    antithetic: bool = True
    tolerance: Optional[float] = None

    def __post_init__(self):
        if self.levels < 0:
            raise DomainError("levels must be >= 0")
        if self.pert_family not in ("coordinate", "zero"):
            raise DomainError(f"unknown perturbation family {self.pert_family!r}")
        if self.tolerance is not None and self.tolerance <= 0:
            raise DomainError("tolerance must be > 0")

    def to_dict(self):
        return {"levels": self.levels, "pert_family": self.pert_family, "antithetic": self.antithetic,
                "tolerance": self.tolerance}


def delta_ladder(grid: TimeGrid, t: float, epsilon: float, levels: int = 6) -> list[float]:
    """``min(epsilon, T - t) 2^-k`` for ``k = 0..levels``, floored to the grid, zeros and repeats dropped."""
    if epsilon <= 0:
        raise DomainError("epsilon must be > 0")
    top = min(epsilon, grid.horizon - t)
    out = []
    for k in range(levels + 1):
        kd = grid.floor_index(top * 2.0**-k) if top * 2.0**-k <= grid.horizon else grid.num_steps
        if kd >= 1 and (not out or grid.time(kd) < out[-1]):
            out.append(grid.time(kd))
    return out


def perturbation_shapes(d: int, family: str) -> list[tuple[np.ndarray, np.ndarray, str]]:
    """Unit perturbation directions in enumeration order, zero first."""
    zero_p, zero_q = np.zeros(d), np.zeros((d, d))
    out = [(zero_p, zero_q, "zero")]
    if family == "zero":
        return out
    for i in range(d):
        for s in (1.0, -1.0):
            p = zero_p.copy()
            p[i] = s
            out.append((p, zero_q, f"p{'+' if s > 0 else '-'}e{i + 1}"))
    for i in range(d):
        for j in range(d):
            for s in (1.0, -1.0):
                q = zero_q.copy()
                q[i, j] = s
                out.append((zero_p, q, f"q{'+' if s > 0 else '-'}E{i + 1}{j + 1}"))
    return out


@dataclass
class Attempt:
    delta: float
    control_index: int
    pert_name: str
    radius: float
    energy: float
    mean_value: float
    value_stderr: float
    quotient: float
    quotient_stderr: float
    distance: Optional[float] = None
    passed: Optional[bool] = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class TangencyCertificate:
    epsilon: float
    delta: float
    control_index: int
    perturbation: PerturbationProcess
    achieved_distance: float
    perturbation_energy: float
    mc_stderr: float
    pert_name: str = "zero"
    trace: list = field(default_factory=list)

    found = True

    def to_dict(self):
        return {
            "found": True,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "control_index": self.control_index,
            "perturbation": self.pert_name,
            "achieved_distance": self.achieved_distance,
            "perturbation_energy": self.perturbation_energy,
            "budget": self.epsilon * self.delta,
            "mc_stderr": self.mc_stderr,
            "trace": [a.to_dict() for a in self.trace],
        }


@dataclass
class TangencyFailure:
    epsilon: float
    best: Optional[Attempt]
    trace: list = field(default_factory=list)

    found = False

    def to_dict(self):
        return {"found": False, "epsilon": self.epsilon, "best_attempt": None if self.best is None else self.best.to_dict(),
                "trace": [a.to_dict() for a in self.trace]}


@dataclass
class DerivativeEstimate:
    kind: str
    value: float
    mc_stderr: float
    ladder: list
    best: Optional[Attempt] = None

    def to_dict(self):
        return {"kind": self.kind, "value": self.value, "mc_stderr": self.mc_stderr, "epsilon_ladder": self.ladder,
                "best_attempt": None if self.best is None else self.best.to_dict()}


class _Evaluator:
    """Runs attempts at a fixed ``(t, x)`` against shared noise, memoised by attempt key."""

    def __init__(self, spec, t, x, candidate, directions, n_paths, seed, search, label):
        self.spec, self.grid = spec, spec.grid
        self.k0 = spec.grid.index(t)
        if self.k0 >= spec.grid.num_steps:
            raise DomainError("tangency searches need t < T")
        self.t = self.grid.time(self.k0)
        self.x = x
        self.candidate = candidate
        self.directions = directions
        self.n, self.seed, self.label = n_paths, seed, label
        self.antithetic = search.antithetic and n_paths % 2 == 0 and n_paths >= 4
        self.noise = draw_noise(spec, n_paths, seed, label, self.antithetic)
        self.v0 = float(candidate(self.t, x.prefix(self.k0))[0])
        self.cache = {}
        self._cells = {}
        self._buffer = np.empty((n_paths, self.grid.size, spec.dimension))
        self._buffer[:, : self.k0 + 1] = x.prefix(self.k0)

    def _frozen_cells(self, ci):
        """Frozen ``(b, sigma)`` on every cell from ``t`` for an open-loop control."""
        if ci not in self._cells:
            grid, d = self.grid, self.spec.dimension
            ctrl = self.directions.controls[ci]
            init = self.x.prefix(self.k0)
            b = np.zeros((grid.num_steps, d))
            s = np.zeros((grid.num_steps, d, d))
            for k in range(self.k0, grid.num_steps):
                a = ctrl.cell_values(self.spec, k, 1, slice(0, 1), None)
                b[k] = self.spec.coefficients.drift(grid.time(k), init, a)[0]
                s[k] = self.spec.coefficients.diffusion(grid.time(k), init, a)[0]
            self._cells[ci] = (b, s)
        return self._cells[ci]

    def _values(self, ctrl, ci, pert, kd, stop):
        k0, k_end = self.k0, self.k0 + kd
        if ctrl.is_feedback:
            cand = self.candidate

            def reduce(X, W, rows):
                return cand(stop, X[:, : k_end + 1])

            return np.concatenate(integrate(
                self.spec, self.t, self.x, ctrl, self.n, self.seed, stop=stop, pert=pert, freeze="initial",
                splice=self.directions.ring_x, label=self.label, antithetic=self.antithetic, reducer=reduce,
                noise=self.noise,
            ))
        # same arithmetic as the frozen fast path of ``integrate``
        b, s = self._frozen_cells(ci)
        cells = slice(k0, k_end)
        drift = b[cells] + pert.p[cells]
        vol = s[cells] + pert.q[cells]
        inc = drift[None] * self.grid.step + np.einsum("kij,nkj->nki", vol, self.noise[:, cells])
        buf = self._buffer
        buf[:, k0 + 1 : k_end + 1] = buf[:, k0 : k0 + 1] + np.cumsum(inc, axis=1)
        return self.candidate(stop, buf[:, : k_end + 1])

    def run(self, delta, ci, pert_p, pert_q, name, radius) -> Attempt:
        key = (delta, ci, name, radius)
        if key in self.cache:
            return self.cache[key]
        grid = self.grid
        kd = grid.index(delta)
        stop = grid.time(self.k0 + kd)
        pert = PerturbationProcess.constant(grid, radius * pert_p, radius * pert_q, self.t, stop)
        vals = self._values(self.directions.controls[ci], ci, pert, kd, stop)
        mean = float(vals.mean())
        se = rng.pair_standard_error(vals, self.antithetic)
        dt = grid.time(kd)
        att = Attempt(
            delta=dt, control_index=ci, pert_name=name, radius=radius,
            energy=pert.energy(grid, self.t, stop), mean_value=mean, value_stderr=se,
            quotient=(mean - self.v0) / dt, quotient_stderr=se / dt,
        )
        self.cache[key] = att
        return att

    def pool(self, deltas, radii, family, controls=None):
        shapes = perturbation_shapes(self.spec.dimension, family)
        controls = range(len(self.directions.controls)) if controls is None else controls
        for delta in deltas:
            for ci in controls:
                for idx, (p, q, name) in enumerate(shapes):
                    for r in ([0.0] if idx == 0 else radii):
                        yield self.run(delta, ci, p, q, name, r)


def _candidate(spec, candidate):
    cand = candidate if candidate is not None else spec.candidate
    if cand is None:
        raise PreconditionError("a candidate function is required")
    return cand


def quasi_tangency_test(
    spec: ProblemSpec,
    t: float,
    x: Path,
    y: float,
    directions: DirectionSet,
    epsilon: float,
    search: SearchConfig = SearchConfig(),
    n_paths: int = 20000,
    seed: int = 0,
    candidate: Optional[CandidateFunction] = None,
    target: Optional[TargetSet] = None,
    label: str = "tangency",
    _evaluator: Optional[_Evaluator] = None,
):
    """First witness ``(delta, control, p, q)`` with budget ``<= epsilon delta`` and
    target distance ``<= epsilon delta + 3 stderr``, or the best failing attempt.

    Enumeration order: delta descending, control index ascending, zero
    perturbation first.
    """
    cand = _candidate(spec, candidate)
    target = target or spec.target_set
    ev = _evaluator or _Evaluator(spec, t, x, cand, directions, n_paths, seed, search, label)
    if not target.contains(ev.v0 - y):
        raise PreconditionError(f"v(t, x) - y = {ev.v0 - y:.6g} is not in the target set")
    radius = math.sqrt(epsilon) * RADIUS_MARGIN
    trace, best, best_excess = [], None, math.inf
    for att in ev.pool(delta_ladder(ev.grid, ev.t, epsilon, search.levels), [radius], search.pert_family):
        att = Attempt(**att.to_dict())
        att.distance = float(target.distance(att.mean_value - y))
        budget = epsilon * att.delta
        ok_budget = att.energy <= budget
        att.passed = bool(ok_budget and att.distance <= budget + 3 * att.value_stderr)
        trace.append(att)
        if att.passed:
            pert = PerturbationProcess.constant(ev.grid, *_shape(spec.dimension, att, search), ev.t,
                                                ev.t + att.delta)
            return TangencyCertificate(epsilon, att.delta, att.control_index, pert, att.distance, att.energy,
                                       att.value_stderr, att.pert_name, trace)
        excess = att.distance - budget
        if ok_budget and excess < best_excess:
            best, best_excess = att, excess
    return TangencyFailure(epsilon, best, trace)


def _shape(d, att, search):
    for p, q, name in perturbation_shapes(d, search.pert_family):
        if name == att.pert_name:
            return att.radius * p, att.radius * q
    raise StructuralError(f"unknown perturbation {att.pert_name}")


def _derivative(kind, spec, t, x, candidate, directions, epsilon_ladder, search, n_paths, seed, label,
                evaluator=None, controls=None):
    ladder = sorted({float(e) for e in epsilon_ladder}, reverse=True)
    if not ladder or ladder[-1] <= 0:
        raise DomainError("epsilon ladder must hold positive values")
    cand = _candidate(spec, candidate)
    ev = evaluator or _Evaluator(spec, t, x, cand, directions, n_paths, seed, search, label)
    deltas = sorted({d for e in ladder for d in delta_ladder(ev.grid, ev.t, e, search.levels)}, reverse=True)
    radii = [math.sqrt(e) * RADIUS_MARGIN for e in ladder]
    pool = list(ev.pool(deltas, radii, search.pert_family, controls))
    pick = min if kind == "epiderivative" else max
    rows = []
    for e in ladder:
        top = min(e, ev.grid.horizon - ev.t) * (1 + 1e-12)
        feas = [a for a in pool if a.delta <= top and a.energy <= e * a.delta]
        if not feas:
            continue
        best = pick(feas, key=lambda a: a.quotient)
        rows.append({"epsilon": e, "value": best.quotient, "stderr": best.quotient_stderr,
                     "feasible_attempts": len(feas), "best": best.to_dict()})
    outer = max if kind == "epiderivative" else min
    top_row = outer(rows, key=lambda r: r["value"])
    best = Attempt(**top_row["best"])
    return DerivativeEstimate(kind, top_row["value"], top_row["stderr"], rows, best), ev


def hypoderivatives_by_control(spec: ProblemSpec, t: float, x: Path, candidate: Optional[CandidateFunction],
                               directions: DirectionSet, epsilon_ladder=(0.1, 0.05, 0.02, 0.01),
                               search: SearchConfig = SearchConfig(), n_paths: int = 20000, seed: int = 0,
                               label: str = "derivative") -> list:
    """Hypoderivative in each single direction of ``directions``, sharing one noise draw.

    Equivalent to calling :func:`hypoderivative` once per control with the same seed.
    """
    cand = _candidate(spec, candidate)
    if cand.upper_bound is None or not math.isfinite(cand.upper_bound):
        raise PreconditionError("the hypoderivative needs a candidate bounded from above")
    ladder = sorted({float(e) for e in epsilon_ladder}, reverse=True)
    ev = _Evaluator(spec, t, x, cand, directions, n_paths, seed, search, label)
    out = []
    for ci in range(len(directions.controls)):
        out.append(_derivative("hypoderivative", spec, t, x, cand, directions, ladder, search, n_paths, seed, label,
                               evaluator=ev, controls=[ci])[0])
    return out


def epiderivative(spec: ProblemSpec, t: float, x: Path, candidate: Optional[CandidateFunction],
                  directions: DirectionSet, epsilon_ladder=(0.1, 0.05, 0.02, 0.01),
                  search: SearchConfig = SearchConfig(), n_paths: int = 20000, seed: int = 0,
                  label: str = "derivative") -> DerivativeEstimate:
    """Max over the ladder of the per-epsilon minimum difference quotient.

    The feasible set at ``epsilon`` holds attempts with ``delta <= min(epsilon, T - t)``
    and energy ``<= epsilon delta``; these sets shrink with ``epsilon``, so the
    per-epsilon minima are non-decreasing down the ladder.
    """
    cand = _candidate(spec, candidate)
    if not math.isfinite(cand.lower_bound):
        raise PreconditionError("the epiderivative needs a candidate bounded from below")
    return _derivative("epiderivative", spec, t, x, cand, directions, epsilon_ladder, search, n_paths, seed,
                       label)[0]


def hypoderivative(spec: ProblemSpec, t: float, x: Path, candidate: Optional[CandidateFunction],
                   direction: DirectionSet, epsilon_ladder=(0.1, 0.05, 0.02, 0.01),
                   search: SearchConfig = SearchConfig(), n_paths: int = 20000, seed: int = 0,
                   label: str = "derivative") -> DerivativeEstimate:
    """Min over the ladder of the per-epsilon maximum difference quotient in one frozen direction."""
    cand = _candidate(spec, candidate)
    if cand.upper_bound is None or not math.isfinite(cand.upper_bound):
        raise PreconditionError("the hypoderivative needs a candidate bounded from above")
    if len(direction.controls) != 1:
        raise StructuralError("the hypoderivative takes a single frozen direction")
    return _derivative("hypoderivative", spec, t, x, cand, direction, epsilon_ladder, search, n_paths, seed,
                       label)[0]


def tangency_derivative_equivalence_check(
    spec: ProblemSpec,
    t: float,
    x: Path,
    candidate: Optional[CandidateFunction],
    directions: DirectionSet,
    epsilon_ladder=(0.1, 0.05, 0.02, 0.01),
    search: SearchConfig = SearchConfig(),
    n_paths: int = 20000,
    seed: int = 0,
) -> dict:
    """Compare the sign of the epiderivative with quasi-tangency at ``y = v(t, x)``.

    The derivative side is affirmative iff the estimate is at most
    ``max(tolerance, 3 stderr)`` (tolerance defaults to the smallest ladder
    epsilon); the tangency side is affirmative iff a certificate exists at
    every epsilon of the ladder.  Both sides read the same attempt pool.
    """
    cand = _candidate(spec, candidate)
    ladder = sorted({float(e) for e in epsilon_ladder}, reverse=True)
    est, ev = _derivative("epiderivative", spec, t, x, cand, directions, ladder, search, n_paths, seed, "derivative")
    tol = max(search.tolerance if search.tolerance is not None else ladder[-1], 3 * est.mc_stderr)
    deriv_ok = est.value <= tol
    y = ev.v0
    results = [quasi_tangency_test(spec, t, x, y, directions, e, search, n_paths, seed, cand, TargetSet(),
                                   _evaluator=ev) for e in ladder]
    qts_ok = all(r.found for r in results)
    return {
        "t": ev.t,
        "y": y,
        "derivative": est.to_dict(),
        "tolerance": tol,
        "derivative_affirmative": bool(deriv_ok),
        "tangency_affirmative": bool(qts_ok),
        "tangency": [{"epsilon": e, **_summary(r)} for e, r in zip(ladder, results)],
        "agree": bool(deriv_ok == qts_ok),
        "passed": bool(deriv_ok == qts_ok),
    }


def _summary(res) -> dict:
    if res.found:
        return {"found": True, "delta": res.delta, "control_index": res.control_index,
                "perturbation": res.pert_name, "achieved_distance": res.achieved_distance,
                "perturbation_energy": res.perturbation_energy, "mc_stderr": res.mc_stderr}
    b = res.best
    return {"found": False, "best_attempt": None if b is None else b.to_dict()}
