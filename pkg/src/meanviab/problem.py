"""
Problem data: coefficients, terminal cost, control set, anchor triple,
target set and candidate function, plus sampling validators for the
standing assumptions (non-anticipativity, Lipschitz/boundedness of the
coefficients, and the space-Lipschitz / time-Hoelder hypothesis on v).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import families, rng
from .errors import ConfigError, DomainError, StructuralError
from .paths import TimeGrid

SLACK = 1e-12


@dataclass(frozen=True)
class ControlSpace:
    """Closed interval ``[lower, upper]`` inside ``[0, 1]`` with a finite grid for infima."""

    lower: float = 0.0
    upper: float = 1.0
    grid_points: int = 11

    def __post_init__(self):
        if not (0.0 <= self.lower <= self.upper <= 1.0):
            raise DomainError(f"control set must satisfy 0 <= lower <= upper <= 1, got [{self.lower}, {self.upper}]")
        if int(self.grid_points) != self.grid_points or self.grid_points < 1:
            raise DomainError("grid_points must be a positive integer")

    @property
    def points(self) -> np.ndarray:
        if self.grid_points == 1:
            return np.array([self.lower])
        return np.linspace(self.lower, self.upper, int(self.grid_points))

    def contains(self, a) -> bool:
        a = np.asarray(a, dtype=float)
        return bool(np.all((a >= self.lower - SLACK) & (a <= self.upper + SLACK)))

    def project(self, a):
        return np.clip(a, self.lower, self.upper)

    def to_dict(self):
        return {"lower": self.lower, "upper": self.upper, "grid_points": int(self.grid_points)}


@dataclass(frozen=True)
class Coefficients:
    """Drift and diffusion of the controlled SDE.

    The wrappers :meth:`drift` and :meth:`diffusion` stop the path argument
    at ``t`` before calling the raw functions and return zero for ``t > T``.
    """

    drift_fn: Callable
    diffusion_fn: Callable
    declared_L_b: float
    grid: TimeGrid
    dimension: int
    descriptor: Optional[dict] = None

    def __post_init__(self):
        if self.declared_L_b < 1:
            raise DomainError("declared_L_b must be >= 1")

    def _prep(self, t, x, a):
        k = self.grid.index(min(t, self.grid.horizon))
        x = x[:, : k + 1]
        a = np.asarray(a, dtype=float).reshape(-1)
        return x, a, max(x.shape[0], a.shape[0])

    def _after_T(self, t):
        return t > self.grid.horizon * (1 + 1e-12)

    def drift(self, t: float, x: np.ndarray, a) -> np.ndarray:
        x, a, n = self._prep(t, x, a)
        if self._after_T(t):
            return np.zeros((n, self.dimension))
        if a.shape[0] != n:
            a = np.broadcast_to(a, (n,))
        return np.broadcast_to(self.drift_fn(t, x, a), (n, self.dimension))

    def diffusion(self, t: float, x: np.ndarray, a) -> np.ndarray:
        x, a, n = self._prep(t, x, a)
        d = self.dimension
        if self._after_T(t):
            return np.zeros((n, d, d))
        if a.shape[0] != n:
            a = np.broadcast_to(a, (n,))
        return np.broadcast_to(self.diffusion_fn(t, x, a), (n, d, d))


@dataclass(frozen=True)
class TerminalCost:
    """Terminal cost ``h``, clipped to ``[-bound, bound]``."""

    fn: Callable
    bound: float
    grid: TimeGrid
    descriptor: Optional[dict] = None

    def evaluate(self, x: np.ndarray) -> tuple[np.ndarray, int]:
        """Clipped values and the number of clipped entries."""
        raw = np.asarray(self.fn(x[:, : self.grid.size]), dtype=float)
        clipped = np.clip(raw, -self.bound, self.bound)
        return clipped, int(np.count_nonzero(clipped != raw))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)[0]


@dataclass(frozen=True)
class AnchorTriple:
    a0: float
    p0: np.ndarray
    q0: np.ndarray

    @classmethod
    def zero(cls, d: int, a0: float = 0.0) -> "AnchorTriple":
        return cls(a0, np.zeros(d), np.zeros((d, d)))

    def to_dict(self):
        return {"a0": self.a0, "p0": np.asarray(self.p0).tolist(), "q0": np.asarray(self.q0).tolist()}


@dataclass(frozen=True)
class CandidateFunction:
    """Non-anticipating candidate ``v(t, x)``; its structural companion is ``v(t, x) - y``."""

    fn: Callable
    declared_L: float
    lower_bound: float
    grid: TimeGrid
    upper_bound: Optional[float] = None
    descriptor: Optional[dict] = None

    def __post_init__(self):
        if self.declared_L < 1:
            raise DomainError("declared_L must be >= 1")

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        k = self.grid.index(t)
        return np.asarray(self.fn(t, x[:, : k + 1]), dtype=float).reshape(x.shape[0])

    def vhat(self, t: float, x: np.ndarray, y) -> np.ndarray:
        return self(t, x) - y

    def shifted(self, time_coef: float = 0.0, offset: float = 0.0) -> "CandidateFunction":
        """``v(t, x) + time_coef (T - t) + offset``."""
        T = self.grid.horizon
        base = self.fn

        def fn(t, x):
            return base(t, x) + time_coef * (T - t) + offset

        desc = None
        if self.descriptor is not None:
            desc = dict(self.descriptor)
            desc["shift"] = {"time_coef": time_coef, "offset": offset}
        lb = self.lower_bound + min(time_coef * T, 0.0) + offset
        ub = None if self.upper_bound is None else self.upper_bound + max(time_coef * T, 0.0) + offset
        return CandidateFunction(fn, self.declared_L + abs(time_coef), lb, self.grid, ub, desc)


@dataclass(frozen=True)
class TargetSet:
    """``(-inf, 0]`` or a closed interval ``[lower, upper]``."""

    kind: str = "half_line_nonpositive"
    lower: float = 0.0
    upper: float = 0.0

    def __post_init__(self):
        if self.kind not in ("half_line_nonpositive", "closed_interval"):
            raise ConfigError(f"unknown target kind {self.kind!r}", "target_set.kind")
        if self.kind == "closed_interval" and not self.lower <= self.upper:
            raise DomainError("closed_interval needs lower <= upper")

    def distance(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "half_line_nonpositive":
            return np.maximum(y, 0.0)
        return np.maximum(np.maximum(self.lower - y, y - self.upper), 0.0)

    def contains(self, y, tol: float = 0.0) -> bool:
        return bool(np.all(self.distance(y) <= tol))

    def to_dict(self):
        if self.kind == "half_line_nonpositive":
            return {"kind": self.kind}
        return {"kind": self.kind, "lower": self.lower, "upper": self.upper}


@dataclass(frozen=True)
class ProblemSpec:
    grid: TimeGrid
    dimension: int
    control_space: ControlSpace
    coefficients: Coefficients
    terminal_cost: TerminalCost
    anchor: AnchorTriple
    target_set: TargetSet = field(default_factory=TargetSet)
    candidate: Optional[CandidateFunction] = None
    name: str = "problem"

    def __post_init__(self):
        d = self.dimension
        if self.coefficients.dimension != d:
            raise StructuralError("coefficient dimension does not match problem dimension")
        if self.coefficients.grid != self.grid or self.terminal_cost.grid != self.grid:
            raise StructuralError("coefficients and terminal cost must use the problem grid")
        if np.shape(self.anchor.p0) != (d,) or np.shape(self.anchor.q0) != (d, d):
            raise StructuralError("anchor (p0, q0) must have shapes (d,) and (d, d)")
        if not self.control_space.contains(self.anchor.a0):
            raise DomainError("anchor control a0 must lie in A")
        if self.candidate is not None and self.candidate.grid != self.grid:
            raise StructuralError("candidate must use the problem grid")

    @property
    def L_b(self) -> float:
        return self.coefficients.declared_L_b

    def with_candidate(self, candidate: Optional[CandidateFunction]) -> "ProblemSpec":
        return ProblemSpec(
            self.grid, self.dimension, self.control_space, self.coefficients, self.terminal_cost,
            self.anchor, self.target_set, candidate, self.name,
        )

    # -- JSON --------------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "ProblemSpec":
        try:
            grid = TimeGrid(float(doc.get("horizon", 1.0)), int(doc.get("num_steps", 128)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "horizon/num_steps") from None
        d = int(doc.get("dimension", 1))
        cs = ControlSpace(**doc.get("control_space", {}))
        cdoc = _require(doc, "coefficients")
        b, s = families.build(
            families.COEFFICIENT_FAMILIES, "coefficients", _require(cdoc, "family", "coefficients"),
            grid, d, cdoc.get("params", {}),
        )
        coeff = Coefficients(b, s, float(_require(cdoc, "declared_L_b", "coefficients")), grid, d,
                             {"family": cdoc["family"], "params": cdoc.get("params", {}),
                              "declared_L_b": cdoc["declared_L_b"]})
        hdoc = _require(doc, "terminal_cost")
        h = families.build(families.COST_FAMILIES, "terminal_cost",
                           _require(hdoc, "family", "terminal_cost"), grid, d, hdoc.get("params", {}))
        cost = TerminalCost(h, float(_require(hdoc, "bound", "terminal_cost")), grid,
                            {"family": hdoc["family"], "params": hdoc.get("params", {}), "bound": hdoc["bound"]})
        adoc = doc.get("anchor", {})
        anchor = AnchorTriple(
            float(adoc.get("a0", cs.lower)),
            np.asarray(adoc.get("p0", [0.0] * d), dtype=float),
            np.asarray(adoc.get("q0", [[0.0] * d] * d), dtype=float),
        )
        target = TargetSet(**doc.get("target_set", {}))
        cand = None
        if doc.get("candidate"):
            cand = candidate_from_dict(doc["candidate"], grid, d)
        return cls(grid, d, cs, coeff, cost, anchor, target, cand, doc.get("name", "problem"))

    @classmethod
    def from_json(cls, text: str) -> "ProblemSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "problem") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        if self.coefficients.descriptor is None or self.terminal_cost.descriptor is None:
            raise ConfigError("only family-built problems can be serialised", "problem")
        doc = {
            "name": self.name,
            "horizon": self.grid.horizon,
            "num_steps": self.grid.num_steps,
            "dimension": self.dimension,
            "control_space": self.control_space.to_dict(),
            "coefficients": self.coefficients.descriptor,
            "terminal_cost": self.terminal_cost.descriptor,
            "anchor": self.anchor.to_dict(),
            "target_set": self.target_set.to_dict(),
        }
        if self.candidate is not None and self.candidate.descriptor is not None:
            doc["candidate"] = self.candidate.descriptor
        return doc


def _require(doc, key, where=None):
    if key not in doc:
        raise ConfigError("missing field", f"{where}.{key}" if where else key)
    return doc[key]


def candidate_from_dict(doc: dict, grid: TimeGrid, d: int) -> CandidateFunction:
    fn = families.build(families.CANDIDATE_FAMILIES, "candidate", _require(doc, "family", "candidate"),
                        grid, d, doc.get("params", {}))
    cand = CandidateFunction(
        fn, float(doc.get("declared_L", 1.0)), float(doc.get("lower_bound", -np.inf)), grid,
        None if doc.get("upper_bound") is None else float(doc["upper_bound"]),
        {k: doc[k] for k in ("family", "params", "declared_L", "lower_bound", "upper_bound") if k in doc},
    )
    shift = doc.get("shift")
    if shift:
        cand = cand.shifted(shift.get("time_coef", 0.0), shift.get("offset", 0.0))
    return cand


# -- validators -----------------------------------------------------------


@dataclass
class ValidationReport:
    name: str
    passed: bool
    stats: dict
    witness: Optional[dict] = None

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "stats": self.stats, "witness": self.witness}


def sample_paths(grid: TimeGrid, d: int, m: int, seed: int, label: str, scale: float = 1.0,
                 extra: int = 0) -> np.ndarray:
    """Brownian-like test paths with random start in [-1, 1]; shape ``(m, N+1+extra, d)``."""
    n = grid.size + extra
    x0 = 2 * rng.uniform_block(seed, label + "/x0", (m, 1, d)) - 1
    inc = rng.normal_block(seed, label + "/inc", (m, n - 1, d)) * np.sqrt(grid.step) * scale
    return np.concatenate([x0, x0 + np.cumsum(inc, axis=1)], axis=1)


def _partners(x: np.ndarray, seed: int, label: str) -> np.ndarray:
    """Comparison paths: a third constant shifts, a third local wiggles, a third independent."""
    m, n, d = x.shape
    u = rng.uniform_block(seed, label + "/mix", (m,))
    mag = 10 ** (-3 + 3 * rng.uniform_block(seed, label + "/mag", (m, 1, 1)))
    sign = np.where(rng.uniform_block(seed, label + "/sign", (m, 1, d)) < 0.5, -1.0, 1.0)
    wig = np.cumsum(rng.normal_block(seed, label + "/wig", (m, n, d)), axis=1) / np.sqrt(n)
    other = 2 * rng.uniform_block(seed, label + "/o0", (m, 1, d)) - 1 + wig[::-1]
    out = np.where((u < 1 / 3)[:, None, None], x + sign * mag,
                   np.where((u < 2 / 3)[:, None, None], x + mag * wig, other))
    return out


def _sample_times(grid: TimeGrid, count: int, seed: int, label: str, low: int = 0) -> list:
    ks = sorted(set(np.floor(low + rng.uniform_block(seed, label, (count,)) * (grid.size - low))
                    .astype(int).clip(low, grid.num_steps).tolist()))
    return ks


def _sup_stopped(diff: np.ndarray, k: int) -> np.ndarray:
    return np.max(np.linalg.norm(diff[:, : k + 1], axis=-1), axis=1)


def check_A2(spec: ProblemSpec, samples: int = 2000, rng_seed: int = 0, scale: float = 1.0) -> ValidationReport:
    """Sampled Lipschitz ratios and magnitudes of ``(b, sigma, h)`` against ``declared_L_b``."""
    if samples < 2:
        raise ConfigError("samples must be >= 2", "samples")
    grid, d, L = spec.grid, spec.dimension, spec.L_b
    coeff = spec.coefficients
    ks = _sample_times(grid, 8, rng_seed, "A2/times")
    per = max(1, samples // len(ks))
    worst_ratio = {"value": 0.0}
    worst_mag = {"value": 0.0}
    for j, k in enumerate(ks):
        t = grid.time(k)
        label = f"A2/{j}"
        x = sample_paths(grid, d, per, rng_seed, label, scale)
        xt = _partners(x, rng_seed, label)
        u = rng.uniform_block(rng_seed, label + "/a", (per,))
        pts = spec.control_space.points
        a = np.where(u < 0.5, pts[(u * 2 * len(pts)).astype(int).clip(0, len(pts) - 1)],
                     spec.control_space.lower + u * (spec.control_space.upper - spec.control_space.lower))
        b1, b2 = coeff.drift(t, x, a), coeff.drift(t, xt, a)
        s1, s2 = coeff.diffusion(t, x, a), coeff.diffusion(t, xt, a)
        num = np.linalg.norm(b1 - b2, axis=1) + np.linalg.norm(s1 - s2, axis=(1, 2))
        den = _sup_stopped(x - xt, k)
        ok = den > 0
        ratio = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
        hx, _ = spec.terminal_cost.evaluate(x)
        mag = np.linalg.norm(b1, axis=1) + np.linalg.norm(s1, axis=(1, 2)) + np.abs(hx)
        i, im = int(np.argmax(ratio)), int(np.argmax(mag))
        if ratio[i] >= worst_ratio["value"]:
            worst_ratio = {"value": float(ratio[i]), "t": t, "a": float(a[i])}
        if mag[im] >= worst_mag["value"]:
            worst_mag = {"value": float(mag[im]), "t": t, "a": float(a[im]),
                         "drift": np.asarray(b1[im]).tolist(), "terminal": float(hx[im])}
    passed = worst_ratio["value"] <= L + SLACK and worst_mag["value"] <= L + SLACK
    witness = None
    if not passed:
        witness = ({"kind": "lipschitz", **worst_ratio} if worst_ratio["value"] > L + SLACK
                   else {"kind": "bound", **worst_mag})
    return ValidationReport(
        "A2", passed,
        {"max_lipschitz_ratio": worst_ratio["value"], "max_magnitude": worst_mag["value"],
         "declared_L_b": L, "samples": per * len(ks)},
        witness,
    )


def check_H(candidate: CandidateFunction, grid: TimeGrid, samples: int = 2000, rng_seed: int = 0,
            dimension: int = 1, scale: float = 1.0) -> ValidationReport:
    """Sampled space-Lipschitz and time-Hoelder ratios of ``v`` against ``declared_L``."""
    if samples < 2:
        raise ConfigError("samples must be >= 2", "samples")
    L, d = candidate.declared_L, dimension
    ks = _sample_times(grid, 8, rng_seed, "H/times")
    per = max(2, samples // (2 * len(ks)))
    space = {"value": 0.0}
    time = {"value": 0.0}
    lowest = np.inf
    for j, k in enumerate(ks):
        t = grid.time(k)
        label = f"H/{j}"
        x = sample_paths(grid, d, per, rng_seed, label, scale)
        xt = _partners(x, rng_seed, label)
        v1, v2 = candidate(t, x), candidate(t, xt)
        lowest = min(lowest, float(v1.min()), float(v2.min()))
        den = _sup_stopped(x - xt, k)
        ok = den > 0
        r = np.where(ok, np.abs(v1 - v2) / np.where(ok, den, 1.0), 0.0)
        i = int(np.argmax(r))
        if r[i] >= space["value"]:
            space = {"value": float(r[i]), "t": t}
        if k == 0:
            continue
        # earlier time s < t: compare v(t, x stopped at s) with v(s, x)
        ks_ = np.floor(rng.uniform_block(rng_seed, label + "/s", (per,)) * k).astype(int)
        for s_idx in sorted(set(ks_.tolist())):
            sel = ks_ == s_idx
            s = grid.time(s_idx)
            xs = x[sel, : s_idx + 1]
            lhs = np.abs(candidate(t, xs) - candidate(s, x[sel]))
            norm_s = np.max(np.linalg.norm(xs, axis=-1), axis=1)
            rt = lhs / ((1 + norm_s) * np.sqrt(t - s))
            i = int(np.argmax(rt))
            if rt[i] >= time["value"]:
                time = {"value": float(rt[i]), "t": t, "s": s}
    lb_ok = lowest >= candidate.lower_bound - SLACK
    passed = space["value"] <= L + SLACK and time["value"] <= L + SLACK and lb_ok
    witness = None
    if not passed:
        if space["value"] > L + SLACK:
            witness = {"kind": "space", **space}
        elif time["value"] > L + SLACK:
            witness = {"kind": "time", **time}
        else:
            witness = {"kind": "lower_bound", "value": lowest}
    return ValidationReport(
        "H", passed,
        {"max_space_ratio": space["value"], "max_time_ratio": time["value"], "declared_L": L,
         "min_value": lowest, "lower_bound": candidate.lower_bound},
        witness,
    )


def check_A1_nonanticipativity(spec: ProblemSpec, samples: int = 200, rng_seed: int = 0) -> ValidationReport:
    """Evaluate the raw b, sigma, h (and v) on path pairs that agree up to t but differ after.

    Passes iff all outputs are bit-identical, and the wrapped coefficients vanish after T.
    """
    grid, d = spec.grid, spec.dimension
    coeff = spec.coefficients
    extra = max(2, grid.num_steps // 4)
    ks = _sample_times(grid, 8, rng_seed, "A1/times")
    per = max(1, samples // len(ks))
    witness = None
    checked = 0
    for j, k in enumerate(ks):
        t = grid.time(k)
        label = f"A1/{j}"
        x = sample_paths(grid, d, per, rng_seed, label, extra=extra)
        tail = rng.normal_block(rng_seed, label + "/tail", x.shape)
        xt = x.copy()
        xt[:, k + 1 :] += 1.0 + tail[:, k + 1 :]
        a = spec.control_space.project(rng.uniform_block(rng_seed, label + "/a", (per,)))
        full, fullt = x[:, : grid.size], xt[:, : grid.size]
        outputs = [
            ("drift", coeff.drift_fn(t, full, a), coeff.drift_fn(t, fullt, a)),
            ("diffusion", coeff.diffusion_fn(t, full, a), coeff.diffusion_fn(t, fullt, a)),
        ]
        if spec.candidate is not None:
            outputs.append(("candidate", spec.candidate.fn(t, full), spec.candidate.fn(t, fullt)))
        checked += per
        for name, o1, o2 in outputs:
            if not np.array_equal(np.asarray(o1), np.asarray(o2)):
                witness = {"function": name, "t": t,
                           "max_difference": float(np.max(np.abs(np.asarray(o1) - np.asarray(o2))))}
                break
        if witness:
            break
    if witness is None:
        # terminal cost: paths extended past T with perturbed tails
        x = sample_paths(grid, d, per, rng_seed, "A1/h", extra=extra)
        xt = x.copy()
        xt[:, grid.size :] += 1.0
        h1, h2 = spec.terminal_cost.fn(x), spec.terminal_cost.fn(xt)
        if not np.array_equal(h1, h2):
            witness = {"function": "terminal_cost", "t": grid.horizon,
                       "max_difference": float(np.max(np.abs(h1 - h2)))}
    if witness is None:
        x = sample_paths(grid, d, 4, rng_seed, "A1/late")
        a = np.full(4, spec.control_space.lower)
        late = grid.horizon + grid.step
        if np.any(coeff.drift(late, x, a) != 0) or np.any(coeff.diffusion(late, x, a) != 0):
            witness = {"function": "vanishing_after_T", "t": late}
    return ValidationReport("A1", witness is None, {"samples": checked, "times": len(ks)}, witness)
