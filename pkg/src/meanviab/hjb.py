"""
Value function, dynamic-programming check, quasi-contingent super- and
subsolution verification, and the comparison sandwich.

Every infimum over controls is a minimum over a declared finite family;
reports name the family so each claim is family-relative.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng
from .errors import DomainError
from .paths import Path
from .problem import CandidateFunction, ProblemSpec
from .sde import ControlProcess, draw_noise, integrate, terminal_values
from .tangency import (DirectionSet, SearchConfig, epiderivative, hypoderivative,
                       hypoderivatives_by_control)

TERMINAL_SLACK = 1e-12
# largest increment array (in floats) shared across a control family
NOISE_CACHE_LIMIT = 2**25


def constant_family(spec: ProblemSpec, t: float = 0.0, values=None) -> list:
    """Constant controls on the grid of ``A`` activated at ``t``."""
    values = spec.control_space.points if values is None else values
    return [ControlProcess.constant(a, t, spec.anchor.a0) for a in values]


def describe_family(family) -> list:
    return [c.describe() for c in family]


@dataclass
class ValueEstimate:
    value: float
    stderr: float
    best_control: Optional[int]
    family: list
    n_paths: int
    seed: int
    t: float = 0.0
    per_control: list = field(default_factory=list)
    clip_count: int = 0

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "best_control": self.best_control, "family": self.family,
                "n_paths": self.n_paths, "seed": self.seed, "t": self.t, "per_control": self.per_control,
                "clip_count": self.clip_count}


def value_function(spec: ProblemSpec, t: float, x: Path, control_family: Sequence[ControlProcess], n_paths: int,
                   seed: int, *, label: str = "value", antithetic: bool = False) -> ValueEstimate:
    """Minimum over the family of Monte Carlo ``E[h(X^{t,x,a})]`` with common random numbers.

    At ``t = T`` the value is ``h(x)`` exactly with zero standard error.
    """
    if not control_family:
        raise DomainError("control family must be non-empty")
    grid = spec.grid
    k0 = grid.index(t)
    fam = describe_family(control_family)
    if k0 == grid.num_steps:
        h, clips = spec.terminal_cost.evaluate(x.values[None])
        return ValueEstimate(float(h[0]), 0.0, 0, fam, n_paths, seed, grid.horizon,
                             [{"mean": float(h[0]), "stderr": 0.0}], clips)
    rows = []
    clips = 0
    noise = None
    if len(control_family) > 1 and n_paths * grid.num_steps * spec.dimension <= NOISE_CACHE_LIMIT:
        noise = draw_noise(spec, n_paths, seed, label, antithetic)
    for a in control_family:
        vals, c = terminal_values(spec, t, x, a, n_paths, seed, label=label, antithetic=antithetic, noise=noise)
        rows.append({"mean": float(vals.mean()), "stderr": rng.pair_standard_error(vals, antithetic)})
        clips += c
    best = int(np.argmin([r["mean"] for r in rows]))
    return ValueEstimate(rows[best]["mean"], rows[best]["stderr"], best, fam, n_paths, seed, grid.time(k0), rows,
                         clips)


def dpp_check(spec: ProblemSpec, t: float, x: Path, s: float, control_family: Sequence[ControlProcess],
              n_paths: int, seed: int, *, outer_paths: int = 100, inner_paths: int = 1000,
              inner_family: Optional[Sequence[ControlProcess]] = None, family_gap: float = 0.0) -> dict:
    """Compare ``V(t, x)`` with ``min_a E[V(s, X^{t,x,a}_{. ^ s})]`` by nested Monte Carlo.

    ``inner_family`` (default: the family re-activated at ``s``) is used for
    the inner values; a deliberately poorer inner family shows up as a
    positive gap.  Passes iff ``|difference| <= 3 combined stderr + family_gap``.
    """
    grid = spec.grid
    k0, ks = grid.index(t), grid.index(s)
    if not k0 < ks <= grid.num_steps:
        raise DomainError("dpp_check needs t < s <= T")
    direct = value_function(spec, t, x, control_family, n_paths, seed, label="dpp/direct")
    inner_family = inner_family or constant_family(spec, grid.time(ks),
                                                   [c.value for c in control_family if c.kind == "constant"])
    outer_rows = []
    for ci, a in enumerate(control_family):
        parts = integrate(spec, t, x, a, outer_paths, seed, stop=grid.time(ks), label="dpp/outer")
        Xo = np.concatenate([p[0] for p in parts], axis=0)
        if ks == grid.num_steps:
            inner_min, _ = spec.terminal_cost.evaluate(Xo)
        else:
            init = np.repeat(Xo[:, : ks + 1], inner_paths, axis=0)
            means = []
            for b in inner_family:
                vals, _ = terminal_values(spec, grid.time(ks), init, b, outer_paths * inner_paths, seed,
                                          label=f"dpp/inner/{ci}")
                means.append(vals.reshape(outer_paths, inner_paths).mean(axis=1))
            inner_min = np.min(np.stack(means), axis=0)
        outer_rows.append({"mean": float(inner_min.mean()),
                           "stderr": float(inner_min.std(ddof=1) / math.sqrt(outer_paths))})
    best = int(np.argmin([r["mean"] for r in outer_rows]))
    nested = outer_rows[best]
    diff = nested["mean"] - direct.value
    comb = math.sqrt(direct.stderr**2 + nested["stderr"] ** 2)
    passed = abs(diff) <= 3 * comb + family_gap
    return {
        "t": grid.time(k0), "s": grid.time(ks),
        "direct": direct.to_dict(),
        "nested": {"value": nested["mean"], "stderr": nested["stderr"], "best_control": best,
                   "per_control": outer_rows, "outer_paths": outer_paths, "inner_paths": inner_paths,
                   "inner_family": describe_family(inner_family)},
        "difference": diff, "combined_stderr": comb, "family_gap": family_gap,
        "passed": bool(passed),
    }


# -- sample points --------------------------------------------------------


def reachable_points(spec: ProblemSpec, x0: Path, n_points: int, seed: int, *, n_paths: int = 256,
                     t_max: Optional[float] = None, label: str = "sample_points"):
    """States reached by the problem's own dynamics under random piecewise-constant controls.

    Returns ``(points, ensemble)`` where ``points`` is a list of ``(t, stopped path)``
    with ``t < T`` (or ``<= t_max``) and ``ensemble`` holds the simulated paths.
    """
    grid = spec.grid
    pts = spec.control_space.points
    u = rng.uniform_block(seed, label + "/controls", (n_paths, grid.num_steps))
    ctrl = ControlProcess("piecewise", values=pts[np.minimum((u * len(pts)).astype(int), len(pts) - 1)],
                          activation_time=0.0, anchor=spec.anchor.a0)
    parts = integrate(spec, 0.0, x0, ctrl, n_paths, seed, label=label)
    X = np.concatenate([p[0] for p in parts], axis=0)
    k_hi = grid.num_steps - 1 if t_max is None else min(grid.floor_index(t_max), grid.num_steps - 1)
    pick = rng.uniform_block(seed, label + "/pick", (n_points, 2))
    points = []
    for i in range(n_points):
        k = int(pick[i, 0] * (k_hi + 1))
        j = int(pick[i, 1] * n_paths)
        v = np.empty_like(X[j])
        v[: k + 1] = X[j, : k + 1]
        v[k + 1 :] = X[j, k]
        points.append((grid.time(k), Path(grid, v)))
    return points, X


# -- semisolutions --------------------------------------------------------


def _verdict(value: float, stderr: float, tol: float, sign: int) -> str:
    """Three-valued sign test: ``sign=+1`` asks ``value <= tol``, ``-1`` asks ``value >= -tol``."""
    v = sign * value
    if v <= tol:
        return "pass"
    if v <= 3 * stderr:
        return "inconclusive"
    return "fail"


@dataclass
class SemisolutionReport:
    role: str
    points: list
    terminal: dict
    tol: float
    family: list = field(default_factory=list)

    @property
    def counts(self) -> dict:
        c = {"pass": 0, "fail": 0, "inconclusive": 0}
        for p in self.points:
            c[p["verdict"]] += 1
        return c

    @property
    def passed(self) -> bool:
        return all(p["verdict"] == "pass" for p in self.points) and self.terminal["passed"]

    def to_dict(self) -> dict:
        return {"role": self.role, "points": self.points, "terminal": self.terminal, "tol": self.tol,
                "counts": self.counts, "family": self.family, "passed": self.passed}


def _terminal_check(spec: ProblemSpec, candidate: CandidateFunction, paths: np.ndarray, sign: int) -> dict:
    grid = spec.grid
    v = candidate(grid.horizon, paths)
    h, clips = spec.terminal_cost.evaluate(paths)
    gap = sign * (v - h)  # sign=+1: v >= h required
    worst = float(np.min(gap))
    return {"passed": bool(worst >= -TERMINAL_SLACK), "worst_margin": worst, "paths": int(paths.shape[0]),
            "clip_count": clips, "relation": "v(T) >= h" if sign > 0 else "v(T) <= h"}


def verify_supersolution(spec: ProblemSpec, candidate: CandidateFunction, sample_points, directions=None,
                         epsilon_ladder=(0.1, 0.05, 0.02, 0.01), tol: float = 0.01, n_paths: int = 10000,
                         seed: int = 0, *, search: SearchConfig = SearchConfig(),
                         terminal_paths: Optional[np.ndarray] = None) -> SemisolutionReport:
    """Epiderivative over the constant-control directions at each point must be ``<= tol``;
    ``v(T, .) >= h`` on the terminal paths."""
    rows = []
    for i, (t, x) in enumerate(sample_points):
        dirs = directions(t, x) if callable(directions) else DirectionSet.from_control_grid(spec, t, x)
        est = epiderivative(spec, t, x, candidate, dirs, epsilon_ladder, search, n_paths, seed)
        rows.append({"index": i, "t": spec.grid.snap(t), "x_t": x.values[spec.grid.index(t)].tolist(),
                     "estimate": est.value, "stderr": est.mc_stderr,
                     "verdict": _verdict(est.value, est.mc_stderr, tol, +1)})
    if terminal_paths is None:
        terminal_paths = np.stack([x.values for _, x in sample_points])
    term = _terminal_check(spec, candidate, terminal_paths, +1)
    return SemisolutionReport("supersolution", rows, term, tol, describe_family(constant_family(spec)))


def verify_subsolution(spec: ProblemSpec, candidate: CandidateFunction, sample_points, shift_paths=None,
                       A_grid=None, epsilon_ladder=(0.1, 0.05, 0.02, 0.01), tol: float = 0.01,
                       n_paths: int = 10000, seed: int = 0, *, search: SearchConfig = SearchConfig(),
                       feedback_controls: Sequence[ControlProcess] = (),
                       terminal_paths: Optional[np.ndarray] = None) -> SemisolutionReport:
    """Min over controls of the hypoderivative in each frozen direction must be ``>= -tol``;
    ``v(T, .) <= h`` on the terminal paths.

    Constant controls on ``A_grid`` need no shift; each of ``feedback_controls``
    is evaluated once per shift path of ``shift_paths`` through the splice.
    """
    grid = spec.grid
    rows = []
    for i, (t, x) in enumerate(sample_points):
        dirs = DirectionSet.from_control_grid(spec, t, x, A_grid)
        ests = hypoderivatives_by_control(spec, t, x, candidate, dirs, epsilon_ladder, search, n_paths, seed)
        per = [{"control": c.describe(), "estimate": e.value, "stderr": e.mc_stderr}
               for c, e in zip(dirs.controls, ests)]
        for fb in feedback_controls:
            for ring in shift_paths or [x]:
                e = hypoderivative(spec, t, x, candidate, DirectionSet.frozen(t, x, fb, ring), epsilon_ladder, search,
                                   n_paths, seed)
                per.append({"control": fb.describe(), "estimate": e.value, "stderr": e.mc_stderr})
        worst = min(per, key=lambda r: r["estimate"])
        rows.append({"index": i, "t": grid.snap(t), "x_t": x.values[grid.index(t)].tolist(),
                     "estimate": worst["estimate"], "stderr": worst["stderr"], "argmin_control": worst["control"],
                     "verdict": _verdict(worst["estimate"], worst["stderr"], tol, -1)})
    if terminal_paths is None:
        terminal_paths = np.stack([x.values for _, x in sample_points])
    term = _terminal_check(spec, candidate, terminal_paths, -1)
    fam = describe_family(constant_family(spec, values=A_grid)) + describe_family(feedback_controls)
    return SemisolutionReport("subsolution", rows, term, tol, fam)


def comparison_check(spec: ProblemSpec, v_minus: CandidateFunction, v_plus: CandidateFunction, sample_points,
                     n_paths: int, seed: int, *, control_family=None, sub_report: Optional[SemisolutionReport] = None,
                     super_report: Optional[SemisolutionReport] = None) -> dict:
    """Sandwich ``v_minus <= V <= v_plus`` at every sample point, up to three standard errors of ``V``."""
    grid = spec.grid
    rows = []
    max_lower = max_upper = max_order = -math.inf
    for t, x in sample_points:
        k = grid.index(t)
        fam = control_family or constant_family(spec, grid.time(k))
        est = value_function(spec, t, x, fam, n_paths, seed, label="comparison")
        vm = float(v_minus(t, x.prefix(k))[0])
        vp = float(v_plus(t, x.prefix(k))[0])
        lower = vm - est.value - 3 * est.stderr
        upper = est.value - vp - 3 * est.stderr
        max_lower, max_upper, max_order = max(max_lower, lower), max(max_upper, upper), max(max_order, vm - vp)
        rows.append({"t": grid.time(k), "x_t": float(x.values[k, 0]), "v_minus": vm, "value": est.value,
                     "stderr": est.stderr, "v_plus": vp})
    violations = sum(1 for r in rows if r["v_minus"] - r["value"] > 3 * r["stderr"] + TERMINAL_SLACK
                     or r["value"] - r["v_plus"] > 3 * r["stderr"] + TERMINAL_SLACK)
    pre = {"subsolution": None if sub_report is None else sub_report.passed,
           "supersolution": None if super_report is None else super_report.passed}
    return {
        "points": rows,
        "max_lower_violation": max_lower,
        "max_upper_violation": max_upper,
        "max_v_minus_minus_v_plus": max_order,
        "violations": violations,
        "premises": pre,
        "passed": bool(violations == 0 and max_order <= TERMINAL_SLACK),
    }


def comparison_csv(report: dict) -> str:
    buf = io.StringIO()
    cols = ["t", "x_t", "v_minus", "value", "stderr", "v_plus"]
    table = np.array([[r[c] for c in cols] for r in report["points"]], dtype=float).reshape(-1, len(cols))
    np.savetxt(buf, table, fmt="%.17g", delimiter=",", header=",".join(cols), comments="")
    return buf.getvalue()
