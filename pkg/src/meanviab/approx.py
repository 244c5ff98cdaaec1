"""
Construction and verification of epsilon-approximate solutions.

The builder is a bounded greedy loop.  At each breakpoint ``tau_k`` a local
quasi-tangency search at a representative point picks a step, a control and
a perturbation; the whole ensemble then advances to ``tau_{k+1}`` with its
coefficients frozen at ``X_{. ^ tau_k}`` (the delayed dynamics).  Breakpoints
are deterministic, so the stopping time and the delay are the same on every
path.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Optional

import numpy as np

from . import rng
from .errors import ConfigError, PreconditionError
from .paths import Path, PathEnsemble, TimeGrid
from .problem import CandidateFunction, ProblemSpec
from .sde import ControlProcess, PerturbationProcess, integrate, loglog_slope
from .tangency import DirectionSet, SearchConfig, perturbation_shapes, quasi_tangency_test


@dataclass(frozen=True)
class DelayFunction:
    """``rho_s = tau_k`` on ``[tau_k, tau_{k+1})`` and ``rho_s = s`` from the last breakpoint on."""

    grid: TimeGrid
    breakpoints: tuple

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple(int(k) for k in self.breakpoints))

    @property
    def times(self) -> list:
        return [self.grid.time(k) for k in self.breakpoints]

    def index(self, k: int) -> int:
        """Grid index of ``rho`` at grid index ``k``."""
        bps = self.breakpoints
        if k >= bps[-1]:
            return k
        j = int(np.searchsorted(bps, k, side="right")) - 1
        return bps[max(j, 0)]

    def __call__(self, s: float) -> float:
        return self.grid.time(self.index(self.grid.floor_index(s)))


@dataclass(eq=False)
class ApproximateSolution:
    epsilon: float
    t: float
    x: Path
    y: float
    tau: float
    delay: DelayFunction
    control: ControlProcess
    perturbation: PerturbationProcess
    ensemble: PathEnsemble
    seed: int
    label: str
    antithetic: bool
    complete: bool
    steps: list = field(default_factory=list)
    diagnostic: Optional[str] = None
    condition_report: dict = field(default_factory=dict)

    @property
    def grid(self) -> TimeGrid:
        return self.ensemble.grid

    def to_dict(self) -> dict:
        g = self.grid
        k0 = g.index(self.t)
        return {
            "epsilon": self.epsilon,
            "t": self.t,
            "y": self.y,
            "x_prefix": self.x.values[: k0 + 1].tolist(),
            "grid": g.to_dict(),
            "tau": self.tau,
            "complete": self.complete,
            "breakpoints": self.delay.times,
            "control": self.control.values.tolist(),
            "perturbation": {"p": self.perturbation.p.tolist(), "q": self.perturbation.q.tolist()},
            "seed": self.seed,
            "stream": self.label,
            "antithetic": self.antithetic,
            "n_paths": self.ensemble.n_paths,
            "steps": self.steps,
            "diagnostic": self.diagnostic,
            "condition_report": self.condition_report,
        }

    def write(self, directory) -> None:
        d = FsPath(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "solution.json").write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        self.ensemble.write_csv(d / "ensemble.csv")

    @classmethod
    def read(cls, directory, spec: ProblemSpec) -> "ApproximateSolution":
        d = FsPath(directory)
        doc = json.loads((d / "solution.json").read_text())
        g = spec.grid
        if TimeGrid(**doc["grid"]) != g:
            raise ConfigError("solution grid differs from the problem grid", "grid")
        table = np.loadtxt(d / "ensemble.csv", delimiter=",", skiprows=1, ndmin=2)
        n = doc["n_paths"]
        values = table[:, 2:].reshape(n, g.size, -1)
        k0 = g.index(doc["t"])
        xv = np.empty((g.size, spec.dimension))
        pre = np.asarray(doc["x_prefix"], float)
        xv[: k0 + 1] = pre
        xv[k0 + 1 :] = pre[-1]
        bps = [g.index(s) for s in doc["breakpoints"]]
        ctrl = ControlProcess("piecewise", values=np.asarray(doc["control"]), activation_time=doc["t"],
                              anchor=spec.anchor.a0)
        pert = PerturbationProcess(doc["perturbation"]["p"], doc["perturbation"]["q"], doc["t"])
        return cls(doc["epsilon"], doc["t"], Path(g, xv), doc["y"], doc["tau"], DelayFunction(g, bps), ctrl, pert,
                   PathEnsemble(g, values, {"seed": doc["seed"], "stream": doc["stream"]}), doc["seed"],
                   doc["stream"], doc["antithetic"], doc["complete"], doc["steps"], doc["diagnostic"],
                   doc["condition_report"])


def _mean_path(grid: TimeGrid, X: np.ndarray, k: int) -> Path:
    v = np.empty((grid.size, X.shape[2]))
    v[: k + 1] = X[:, : k + 1].mean(axis=0)
    v[k + 1 :] = v[k]
    return Path(grid, v)


def _stopped(grid: TimeGrid, row: np.ndarray, k: int) -> Path:
    v = np.empty((grid.size, row.shape[1]))
    v[: k + 1] = row[: k + 1]
    v[k + 1 :] = row[k]
    return Path(grid, v)


def local_step(spec: ProblemSpec, t_k: float, x_k: np.ndarray, y: float, epsilon: float,
               search: SearchConfig = SearchConfig(), n_paths: int = 4000, seed: int = 0,
               candidate: Optional[CandidateFunction] = None, mode: str = "mean_field", vote_paths: int = 5,
               label: str = "approx/local") -> dict:
    """One tangency step from the realized stopped paths ``x_k`` (shape ``(n, >= k+1, d)``).

    Returns a dict with ``found``; on success also ``delta``, ``control``,
    ``p``, ``q`` (constant over the segment) and the certificate summary.
    The search runs at the mean stopped path (``mean_field``) or at the first
    ``vote_paths`` paths with a majority vote (``per_path``); the level ``y``
    is raised to ``v(t_k, .)`` at the representative point when needed so the
    search starts inside the target.
    """
    grid = spec.grid
    cand = candidate or spec.candidate
    if cand is None:
        raise PreconditionError("a candidate function is required")
    k = grid.index(t_k)
    if k >= grid.num_steps:
        raise PreconditionError("local steps need t_k < T")
    if mode == "mean_field":
        reps = [_mean_path(grid, x_k, k)]
    elif mode == "per_path":
        reps = [_stopped(grid, x_k[i], k) for i in range(min(vote_paths, x_k.shape[0]))]
    else:
        raise ConfigError(f"unknown local-step mode {mode!r}", "mode")
    results = []
    for rep in reps:
        v_rep = float(cand(grid.time(k), rep.prefix(k))[0])
        y_rep = y if spec.target_set.contains(v_rep - y) else max(y, v_rep)
        dirs = DirectionSet.from_control_grid(spec, grid.time(k), rep)
        res = quasi_tangency_test(spec, grid.time(k), rep, y_rep, dirs, epsilon, search, n_paths, seed, cand,
                                  label=label)
        results.append((res, dirs))
    found = [(r, d) for r, d in results if r.found]
    if not found:
        best = results[0][0].best
        return {"found": False, "t": grid.time(k),
                "diagnostic": "no quasi-tangency witness at the representative point",
                "best_attempt": None if best is None else best.to_dict()}
    order = {name: i for i, (_, _, name) in enumerate(perturbation_shapes(spec.dimension, search.pert_family))}
    keys = [(-r.delta, r.control_index, order[r.pert_name]) for r, _ in found]
    counts = Counter(keys)
    top = max(counts.values())
    key = min(kk for kk, c in counts.items() if c == top)
    res, dirs = found[keys.index(key)]
    k1 = k + grid.index(res.delta)
    return {
        "found": True,
        "t": grid.time(k),
        "delta": res.delta,
        "control": dirs.controls[res.control_index].value,
        "control_index": res.control_index,
        "perturbation": res.pert_name,
        "p": res.perturbation.p[k].tolist(),
        "q": res.perturbation.q[k].tolist(),
        "achieved_distance": res.achieved_distance,
        "perturbation_energy": res.perturbation_energy,
        "mc_stderr": res.mc_stderr,
        "votes": top,
        "voters": len(reps),
        "next_index": k1,
    }


def build_approx_solution(spec: ProblemSpec, t: float, x: Path, y: float, epsilon: float,
                          search: SearchConfig = SearchConfig(), n_paths: int = 20000, seed: int = 0,
                          max_steps: int = 1000, *, candidate: Optional[CandidateFunction] = None,
                          mode: str = "mean_field", local_paths: int = 4000, vote_paths: int = 5,
                          tol: float = 0.0, label: str = "approx") -> ApproximateSolution:
    """Greedy construction of an epsilon-approximate solution started at ``(t, x, y)``.

    Stops when the last breakpoint reaches ``T`` or after ``max_steps`` steps;
    an unfinished or halted construction is returned with ``complete=False``.
    """
    grid, d = spec.grid, spec.dimension
    cand = candidate or spec.candidate
    if cand is None:
        raise PreconditionError("a candidate function is required")
    k0 = grid.index(t)
    if k0 >= grid.num_steps:
        raise PreconditionError("approximate solutions need t < T")
    v0 = float(cand(grid.time(k0), x.prefix(k0))[0])
    if not spec.target_set.contains(v0 - y):
        raise PreconditionError(f"v(t, x) - y = {v0 - y:.6g} is not in the target set")
    if epsilon <= 0:
        raise ConfigError("epsilon must be > 0", "epsilon")
    antithetic = search.antithetic and n_paths % 2 == 0
    N = grid.num_steps
    X = np.empty((n_paths, grid.size, d))
    X[:] = x.values[None]
    controls = np.full(N, spec.anchor.a0)
    P = np.zeros((N, d))
    Q = np.zeros((N, d, d))
    bps = [k0]
    steps = []
    diagnostic = None
    while bps[-1] < N and len(steps) < max_steps:
        k = bps[-1]
        step = local_step(spec, grid.time(k), X[:, : k + 1], y, epsilon, search, local_paths, seed, cand, mode,
                          vote_paths, label=f"{label}/local/{len(steps)}")
        steps.append(step)
        if not step["found"]:
            diagnostic = f"halted at t={grid.time(k):.6g}: {step['diagnostic']}"
            break
        k1 = step["next_index"]
        controls[k:k1] = step["control"]
        P[k:k1] = step["p"]
        Q[k:k1] = step["q"]
        ctrl = ControlProcess("piecewise", values=controls, activation_time=grid.time(k0), anchor=spec.anchor.a0)
        pert = PerturbationProcess(P, Q, grid.time(k0))
        parts = integrate(spec, grid.time(k), X, ctrl, n_paths, seed, stop=grid.time(k1), pert=pert,
                          freeze=lambda j, kk=k: kk, label=label, antithetic=antithetic)
        X = np.concatenate([p[0] for p in parts], axis=0)
        bps.append(k1)
    if diagnostic is None and bps[-1] < N:
        diagnostic = f"max_steps={max_steps} exhausted at t={grid.time(bps[-1]):.6g}"
    complete = bps[-1] == N
    if len(bps) == 1:
        # no step taken: a degenerate solution with tau = t is reported as incomplete
        bps.append(k0)
    ctrl = ControlProcess("piecewise", values=controls, activation_time=grid.time(k0), anchor=spec.anchor.a0)
    pert = PerturbationProcess(P, Q, grid.time(k0))
    sol = ApproximateSolution(
        epsilon, grid.time(k0), x, y, grid.time(bps[-1]), DelayFunction(grid, _unique(bps)), ctrl, pert,
        PathEnsemble(grid, X, {"seed": seed, "stream": label, "stream_id": rng.stream_id(label)}),
        seed, label, antithetic, complete, steps, diagnostic,
    )
    sol.condition_report = verify_approx_solution(spec, sol, tol=tol, candidate=cand)
    return sol


def _unique(bps):
    out = []
    for k in bps:
        if not out or k != out[-1]:
            out.append(k)
    return out


def replay(spec: ProblemSpec, sol: ApproximateSolution, n_paths: Optional[int] = None) -> np.ndarray:
    """Re-run the delayed dynamics from the stored data (the first ``n_paths`` paths)."""
    grid = spec.grid
    n = sol.ensemble.n_paths if n_paths is None else n_paths
    k_tau = grid.index(sol.tau)
    if k_tau == grid.index(sol.t):
        return np.broadcast_to(sol.x.values[None], (n,) + sol.x.values.shape).copy()
    parts = integrate(spec, sol.t, sol.x, sol.control, n, sol.seed, stop=sol.tau, pert=sol.perturbation,
                      freeze=sol.delay.index, label=sol.label, antithetic=sol.antithetic)
    return np.concatenate([p[0] for p in parts], axis=0)


def verify_approx_solution(spec: ProblemSpec, sol: ApproximateSolution, tol: float = 0.0,
                           candidate: Optional[CandidateFunction] = None) -> dict:
    """Re-evaluate the six conditions (i)-(vi) of an epsilon-approximate solution from the stored data."""
    grid = spec.grid
    cand = candidate or spec.candidate
    eps = sol.epsilon
    k0, k_tau = grid.index(sol.t), grid.index(sol.tau)
    X = sol.ensemble.values
    rep = {}

    # (i) deterministic stopping time inside (t, T]
    rep["i"] = {"passed": bool(sol.t < sol.tau <= grid.horizon), "tau": sol.tau, "t": sol.t}

    # (ii) delay: monotone, lag at most epsilon before tau, identity after tau
    bps = list(sol.delay.breakpoints)
    rho = np.array([sol.delay.index(k) for k in range(grid.size)])
    ks = np.arange(grid.size)
    gaps = np.diff([grid.time(k) for k in bps]) if len(bps) > 1 else np.array([0.0])
    lag = float(np.max(gaps)) if gaps.size else 0.0
    ok_ii = (
        bps[0] == k0 and bps[-1] == k_tau and all(b > a for a, b in zip(bps, bps[1:]))
        and bool(np.all(np.diff(rho[k0:]) >= 0))
        and bool(np.all(rho[k0:k_tau] <= ks[k0:k_tau]))
        and lag <= eps * (1 + 1e-12)
        and bool(np.all(rho[k_tau:] == ks[k_tau:]))
    )
    rep["ii"] = {"passed": bool(ok_ii), "max_lag": lag, "slack": eps - lag}

    # (iii) admissible control and perturbation energy within epsilon (tau - t)
    cvals = sol.control.values[k0:k_tau]
    energy = sol.perturbation.energy(grid, sol.t, sol.tau)
    budget = eps * (sol.tau - sol.t)
    ok_iii = spec.control_space.contains(cvals) and energy <= budget
    rep["iii"] = {"passed": bool(ok_iii), "energy": energy, "budget": budget, "slack": budget - energy,
                  "excess": max(energy - budget, 0.0)}

    # (iv) square-integrable delayed coefficients (finite empirical second moments)
    m2 = 0.0
    n = X.shape[0]
    for k in range(k0, k_tau):
        a = sol.control.cell_values(spec, k, n, slice(0, n), None)
        xs = X[:, : rho[k] + 1]
        b = spec.coefficients.drift(grid.time(k), xs, a)
        s = spec.coefficients.diffusion(grid.time(k), xs, a)
        m2 += float(np.mean(np.sum(b**2, axis=1) + np.sum(s**2, axis=(1, 2)))) * grid.step
    rep["iv"] = {"passed": bool(math.isfinite(m2)), "second_moment": m2}

    # (v) the ensemble solves the delayed equation and starts from x
    Y = replay(spec, sol)
    replay_gap = float(np.max(np.abs(Y - X))) if Y.shape == X.shape else math.inf
    start_ok = bool(np.array_equal(X[:, : k0 + 1], np.broadcast_to(sol.x.values[None, : k0 + 1], X[:, : k0 + 1].shape)))
    frozen_ok = bool(np.all(X[:, k_tau:] == X[:, k_tau : k_tau + 1]))
    rep["v"] = {"passed": bool(replay_gap <= 1e-12 and start_ok and frozen_ok), "replay_gap": replay_gap,
                "initial_segment_exact": start_ok, "stopped_after_tau": frozen_ok}

    # (vi) distance of E[v(rho_s ^ tau, X) - y] to K at every grid time s in [t, T]
    s_idx = np.arange(k0, grid.size)
    ridx = np.minimum(rho[s_idx], k_tau)
    uniq = sorted(set(ridx.tolist()))
    means, ses = {}, {}
    for j in uniq:
        vals = cand(grid.time(j), X[:, : j + 1]) - sol.y
        means[j] = float(vals.mean())
        ses[j] = 0.0 if j == k0 else rng.pair_standard_error(vals, sol.antithetic)
    rows = []
    worst = -math.inf
    ok_vi = True
    for s, j in zip(s_idx, ridx):
        dist = float(spec.target_set.distance(means[j]))
        bound = eps * (grid.time(min(s, k_tau)) - sol.t)
        allow = max(tol, 3 * ses[j])
        excess = dist - bound
        worst = max(worst, excess)
        ok = excess <= allow
        ok_vi &= ok
        rows.append({"s": grid.time(s), "distance": dist, "bound": bound, "stderr": ses[j], "passed": bool(ok)})
    rep["vi"] = {"passed": bool(ok_vi), "max_excess": worst, "tolerance": tol, "profile": rows}
    rep["all_passed"] = bool(all(rep[c]["passed"] for c in ("i", "ii", "iii", "iv", "v", "vi")))
    return rep


def delayed_vs_true_gap(spec: ProblemSpec, sol: ApproximateSolution, n_paths: Optional[int] = None,
                        seed: Optional[int] = None) -> dict:
    """``E sup_{s <= T_1} |X^{t,x,a}_s - X_s|^2`` per grid time ``T_1``.

    The true dynamics use the solution's control and the same noise stream,
    so the gap isolates the delay and the perturbations.
    """
    if not sol.complete:
        raise PreconditionError("the gap is defined for complete solutions (tau = T)")
    grid = spec.grid
    n = sol.ensemble.n_paths if n_paths is None else min(n_paths, sol.ensemble.n_paths)
    seed = sol.seed if seed is None else seed
    k0 = grid.index(sol.t)
    if seed == sol.seed:
        Y = np.asarray(sol.ensemble.values[:n])
    else:
        parts = integrate(spec, sol.t, sol.x, sol.control, n, seed, stop=sol.tau, pert=sol.perturbation,
                          freeze=sol.delay.index, label=sol.label, antithetic=sol.antithetic)
        Y = np.concatenate([p[0] for p in parts], axis=0)
    parts = integrate(spec, sol.t, sol.x, sol.control, n, seed, label=sol.label, antithetic=sol.antithetic)
    Xt = np.concatenate([p[0] for p in parts], axis=0)
    sq = np.maximum.accumulate(np.sum((Xt - Y) ** 2, axis=-1), axis=1)
    gaps = sq.mean(axis=0)
    return {
        "epsilon": sol.epsilon,
        "times": grid.times[k0:].tolist(),
        "gaps": gaps[k0:].tolist(),
        "gap_T": float(gaps[-1]),
        "stderr_T": rng.pair_standard_error(sq[:, -1], sol.antithetic),
        "n_paths": n,
    }


def gap_scaling_check(spec: ProblemSpec, t: float, x: Path, y: float, epsilons, search: SearchConfig = SearchConfig(),
                      n_paths: int = 20000, seed: int = 0, slope_range=(0.7, 1.3), **build_kwargs) -> dict:
    """Fit the log-log slope of the terminal gap against epsilon over a ladder.

    Passes iff every solution completes, every gap is positive and the slope
    lies in ``slope_range``.  A gap that vanishes identically (state-independent
    coefficients, no perturbation) leaves the slope undefined and fails.
    """
    eps = sorted(float(e) for e in epsilons)
    rows = []
    for e in eps:
        sol = build_approx_solution(spec, t, x, y, e, search, n_paths, seed, **build_kwargs)
        row = {"epsilon": e, "complete": sol.complete, "steps": len(sol.steps)}
        if sol.complete:
            g = delayed_vs_true_gap(spec, sol)
            row.update(gap_T=g["gap_T"], stderr_T=g["stderr_T"])
        rows.append(row)
    gaps = [r.get("gap_T", math.nan) for r in rows]
    slope = loglog_slope(eps, gaps) if all(r["complete"] for r in rows) else math.nan
    positive = all(g > 0 for g in gaps)
    C = max((g / e for g, e in zip(gaps, eps) if g == g), default=math.nan)
    passed = bool(positive and math.isfinite(slope) and slope_range[0] <= slope <= slope_range[1])
    return {
        "epsilons": eps,
        "rows": rows,
        "slope": slope,
        "fitted_C": C,
        "slope_range": list(slope_range),
        "all_gaps_zero": bool(all(g == 0 for g in gaps)),
        "grid_step": spec.grid.step,
        "passed": passed,
    }
