"""
Built-in benchmark problems with closed-form value functions.

All benchmarks live in dimension one on ``[0, 1]`` with 128 steps.  Clip
levels are far outside the range the tested states reach, so formulas
derived without clipping stay valid; the clip counters certify this on
every Monte Carlo run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from . import rng
from .errors import ConfigError
from .hjb import constant_family, value_function
from .paths import Path
from .problem import ProblemSpec
from .sde import ControlProcess, terminal_values

SIGMA_MIN = 0.2
SIGMA_MAX = 1.0


@dataclass(frozen=True, eq=False)
class Benchmark:
    id: str
    spec: ProblemSpec
    oracle_value: Callable[[float, Path], float]
    oracle_control: ControlProcess
    notes: str
    x0: float = 0.3

    def start_path(self, value: Optional[float] = None) -> Path:
        return Path.constant(self.spec.grid, self.x0 if value is None else value)

    def family(self, t: float = 0.0) -> list:
        return constant_family(self.spec, t)

    def to_dict(self) -> dict:
        return {"id": self.id, "notes": self.notes, "x0": self.x0, "problem": self.spec.to_dict(),
                "oracle_control": self.oracle_control.describe()}


def _doc(name, control, coeff, cost, candidate, num_steps=128):
    return {
        "name": name,
        "horizon": 1.0,
        "num_steps": num_steps,
        "dimension": 1,
        "control_space": control,
        "coefficients": coeff,
        "terminal_cost": cost,
        "anchor": {"a0": control["lower"]},
        "target_set": {"kind": "half_line_nonpositive"},
        "candidate": candidate,
    }


def _xt(spec, t, x):
    return float(x.values[spec.grid.index(t), 0])


def benchmark_docs(clip: float = 10.0) -> dict:
    """JSON problem documents of the built-in benchmarks."""
    unit = {"lower": 0.0, "upper": 1.0, "grid_points": 11}
    single = {"lower": 0.0, "upper": 0.0, "grid_points": 1}
    sq_clip = clip**2
    return {
        "B0": _doc(
            "B0", single,
            {"family": "controlled_drift", "params": {"drift_scale": 0.0}, "declared_L_b": 1.0 + clip},
            {"family": "linear", "bound": clip},
            {"family": "gaussian_clip_mean", "params": {"sigma": 1.0, "clip": clip}, "declared_L": 1.0,
             "lower_bound": -clip, "upper_bound": clip},
        ),
        "B1": _doc(
            "B1", unit,
            {"family": "controlled_drift", "declared_L_b": 2.0 + clip},
            {"family": "linear", "bound": clip},
            {"family": "linear", "params": {"clip": clip}, "declared_L": 1.0, "lower_bound": -clip,
             "upper_bound": clip},
        ),
        "B2": _doc(
            "B2", unit,
            {"family": "controlled_vol", "params": {"sigma_min": SIGMA_MIN, "sigma_max": SIGMA_MAX},
             "declared_L_b": 2.0 + sq_clip},
            {"family": "square", "bound": sq_clip},
            {"family": "square", "params": {"time_coef": SIGMA_MIN**2, "clip": sq_clip}, "declared_L": 2.0 * clip,
             "lower_bound": 0.0, "upper_bound": sq_clip},
        ),
        "B3": _doc(
            "B3", single,
            {"family": "controlled_drift", "params": {"drift_scale": 0.0}, "declared_L_b": 1.0 + clip},
            {"family": "abs_increment", "params": {"split": 0.5}, "bound": clip},
            {"family": "abs_increment_mean", "params": {"sigma": 1.0, "split": 0.5}, "declared_L": 2.0,
             "lower_bound": 0.0, "upper_bound": clip},
        ),
        "B4": _doc(
            "B4", unit,
            {"family": "controlled_drift", "declared_L_b": 2.0 + clip},
            {"family": "linear", "params": {"weight": -1.0}, "bound": clip},
            {"family": "linear", "params": {"scale": -1.0, "time_coef": -1.0, "clip": clip}, "declared_L": 2.0,
             "lower_bound": -clip, "upper_bound": clip},
        ),
    }


def builtin_benchmarks() -> list[Benchmark]:
    docs = benchmark_docs()
    out = []
    for bid, doc in docs.items():
        spec = ProblemSpec.from_dict(doc)
        T = spec.grid.horizon
        cand = spec.candidate
        if bid == "B0":
            oracle = (lambda c: lambda t, x: float(c(t, x.prefix(x.grid.index(t)))[0]))(cand)
            ctrl = ControlProcess.constant(0.0)
            notes = "uncontrolled Brownian motion, h = clip(x_T); V = E clip(x_t + Z sqrt(T - t)) by Gauss-Hermite"
        elif bid == "B1":
            oracle = (lambda s: lambda t, x: _xt(s, t, x))(spec)
            ctrl = ControlProcess.constant(0.0)
            notes = "b = a, sigma = 1, h = clip(x_T); V = x_t, attained by a = 0"
        elif bid == "B2":
            oracle = (lambda s: lambda t, x: _xt(s, t, x) ** 2 + SIGMA_MIN**2 * (T - s.grid.snap(t)))(spec)
            ctrl = ControlProcess.constant(0.0)
            notes = ("b = 0, sigma = 0.2 + 0.8 a, h = clip(x_T^2); V = x_t^2 + 0.04 (T - t), "
                     "attained at the minimal volatility a = 0")
        elif bid == "B3":
            oracle = (lambda c: lambda t, x: float(c(t, x.prefix(x.grid.index(t)))[0]))(cand)
            ctrl = ControlProcess.constant(0.0)
            notes = ("uncontrolled, h = clip(|x_T - x_{T/2}|); V = sqrt(T / pi) for t <= T/2, "
                     "folded-normal mean afterwards")
        else:
            oracle = (lambda s: lambda t, x: -_xt(s, t, x) - (T - s.grid.snap(t)))(spec)
            ctrl = ControlProcess.constant(1.0)
            notes = "b = a, sigma = 1, h = clip(-x_T); V = -x_t - (T - t), attained by a = 1"
        out.append(Benchmark(bid, spec, oracle, ctrl, notes))
    return out


def get_benchmark(bid: str) -> Benchmark:
    for b in builtin_benchmarks():
        if b.id == bid:
            return b
    raise ConfigError(f"unknown benchmark {bid!r}", "id")


def oracle_consistency_check(bench: Benchmark, n_paths: int, seed: int, t: float = 0.0,
                             x: Optional[Path] = None) -> dict:
    """(a) brute-force minimum over constant controls, (b) the oracle control, (c) inactive clipping."""
    spec = bench.spec
    x = x or bench.start_path()
    oracle = bench.oracle_value(t, x)
    est = value_function(spec, t, x, bench.family(t), n_paths, seed, label="bench")
    gap_a = est.value - oracle
    ok_a = abs(gap_a) <= 3 * est.stderr + 1e-12
    vals, clips_b = terminal_values(spec, t, x, bench.oracle_control, n_paths, seed, label="bench")
    se_b = rng.pair_standard_error(vals, False)
    gap_b = float(vals.mean()) - oracle
    ok_b = abs(gap_b) <= 3 * se_b + 1e-12
    clips = est.clip_count + clips_b
    return {
        "id": bench.id,
        "t": spec.grid.snap(t),
        "x_t": float(x.values[spec.grid.index(t), 0]),
        "oracle": oracle,
        "brute_force": {"value": est.value, "stderr": est.stderr, "best_control": est.best_control,
                        "gap": gap_a, "passed": bool(ok_a)},
        "oracle_control": {"value": float(vals.mean()), "stderr": se_b, "gap": gap_b, "passed": bool(ok_b)},
        "clipping": {"clip_count": clips, "passed": clips == 0},
        "n_paths": n_paths,
        "seed": seed,
        "passed": bool(ok_a and ok_b and clips == 0),
    }
