"""
``meanviab`` command-line entry point.

Every command resolves a run configuration (defaults, then ``--config`` JSON,
then explicit flags), delegates to one module operation family, writes a
schema-validated JSON report plus CSV data to the output directory, and
prints one summary line per verdict.  Exit status: 0 all verdicts pass,
1 a verdict failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path as FsPath
from typing import Optional

import numpy as np

from . import reporting, rng
from .approx import build_approx_solution, delayed_vs_true_gap
from .bench import benchmark_docs, get_benchmark, oracle_consistency_check
from .errors import ConfigError, DomainError, MeanViabError, StructuralError
from .hjb import (comparison_check, comparison_csv, constant_family, reachable_points, value_function,
                  verify_subsolution, verify_supersolution)
from .paths import Path
from .problem import ProblemSpec, check_A1_nonanticipativity, check_A2, check_H
from .sde import ControlProcess, loglog_slope, simulate_controlled
from .tangency import DirectionSet, SearchConfig, tangency_derivative_equivalence_check
from .viability import ViabilityQuery, approx_viability_score, test_necessity

COMMANDS = ("simulate", "value", "viability", "tangency", "epsilon-solve", "verify", "compare", "bench")

DEFAULT_LADDER = [0.1, 0.05, 0.02, 0.01]

# per-command defaults; keys double as the accepted ``--config`` fields
DEFAULTS = {
    "common": {"id": None, "problem": None, "seed": None, "threads": 1, "out": None, "t": 0.0, "x0": None,
               "family": "grid"},
    "simulate": {"paths": 1000, "control": None},
    "value": {"paths": 100000},
    "viability": {"paths": 20000, "y": None, "mode": "sup_over_s", "tol": 0.01, "eps": [0.1]},
    "tangency": {"paths": 20000, "eps": DEFAULT_LADDER, "tol": None, "points": 0},
    "epsilon-solve": {"paths": 20000, "eps": [0.2, 0.1, 0.05], "y": None, "max_steps": 1000,
                      "slope_min": 0.7, "slope_max": 1.3},
    "verify": {"paths": 10000, "eps": DEFAULT_LADDER, "tol": 0.01, "role": "super", "c": 0.0, "points": 20,
               "inconclusive_max": 0.1},
    "compare": {"paths": 100000, "deriv_paths": 10000, "eps": DEFAULT_LADDER, "tol": 0.01, "c": 0.1,
                "points": 10},
    "bench": {"paths": 100000, "validator_samples": 2000},
}

# fields that never enter the report, so outputs do not depend on them
UNRECORDED = ("out", "threads", "config")


# -- configuration ----------------------------------------------------------


def _int(v, field, lo=None):
    if isinstance(v, bool):
        raise ConfigError(f"expected an integer, got {v!r}", field)
    try:
        f = float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"expected an integer, got {v!r}", field) from None
    if not math.isfinite(f) or f != int(f):
        raise ConfigError(f"expected an integer, got {v!r}", field)
    i = int(f)
    if lo is not None and i < lo:
        raise ConfigError(f"must be >= {lo}, got {i}", field)
    return i


def _float(v, field, positive=False):
    if isinstance(v, bool):
        raise ConfigError(f"expected a number, got {v!r}", field)
    try:
        f = float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a number, got {v!r}", field) from None
    if not math.isfinite(f):
        raise ConfigError(f"must be finite, got {v!r}", field)
    if positive and f <= 0:
        raise ConfigError(f"must be > 0, got {f}", field)
    return f


def _float_list(v, field):
    if isinstance(v, str):
        v = [s for s in v.split(",") if s.strip()]
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError("expected a non-empty list of numbers", field)
    return [_float(e, field, positive=True) for e in v]


def _choice(v, field, options):
    if v not in options:
        raise ConfigError(f"must be one of {', '.join(options)}, got {v!r}", field)
    return v


def resolve_config(command: str, flags: dict) -> dict:
    """Merge defaults, the ``--config`` file and explicit flags, then validate."""
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[command])
    if flags.get("config"):
        try:
            doc = json.loads(FsPath(flags["config"]).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc.strerror}", "config") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "config") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object", "config")
        for key, val in doc.items():
            k = key.replace("-", "_")
            if k not in cfg:
                raise ConfigError(f"unknown field for {command}", key)
            cfg[k] = val
    for key, val in flags.items():
        if key in cfg and val is not None:
            cfg[key] = val

    if cfg["seed"] is None:
        raise ConfigError("a seed is required (no wall-clock default)", "seed")
    cfg["seed"] = _int(cfg["seed"], "seed", 0)
    cfg["paths"] = _int(cfg["paths"], "paths", 1)
    cfg["threads"] = _int(cfg["threads"], "threads", 1)
    cfg["t"] = _float(cfg["t"], "t")
    if (cfg["id"] is None) == (cfg["problem"] is None):
        raise ConfigError("exactly one of --id and --problem is required", "id")
    if cfg["x0"] is not None:
        cfg["x0"] = _float(cfg["x0"], "x0")
    if "eps" in cfg:
        cfg["eps"] = _float_list(cfg["eps"], "eps")
    if cfg.get("tol") is not None:
        cfg["tol"] = _float(cfg["tol"], "tol", positive=True)
    for key in ("points", "max_steps", "deriv_paths", "validator_samples"):
        if key in cfg:
            cfg[key] = _int(cfg[key], key, 0 if key == "points" else 1)
    for key in ("c", "y", "control", "slope_min", "slope_max", "inconclusive_max"):
        if cfg.get(key) is not None:
            cfg[key] = _float(cfg[key], key)
    if "role" in cfg:
        _choice(cfg["role"], "role", ("super", "sub"))
    if "mode" in cfg:
        _choice(cfg["mode"], "mode", ("sup_over_s", "per_s"))
    if not isinstance(cfg["family"], (str, list)):
        raise ConfigError("expected 'grid' or a list of control values", "family")
    if cfg["out"] is None:
        cfg["out"] = os.environ.get("MEANVIAB_OUT") or "meanviab_out"
    return cfg


def recorded(cfg: dict) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if k not in UNRECORDED}


# -- problem plumbing -------------------------------------------------------


class Problem:
    """The resolved problem: spec, start path and, for benchmarks, the oracle."""

    def __init__(self, cfg: dict):
        self.bench = None
        if cfg["id"] is not None:
            self.bench = get_benchmark(str(cfg["id"]))
            self.spec = self.bench.spec
            x0 = self.bench.x0 if cfg["x0"] is None else cfg["x0"]
        else:
            try:
                text = FsPath(cfg["problem"]).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read problem file: {exc.strerror}", "problem") from None
            self.spec = ProblemSpec.from_json(text)
            x0 = 0.0 if cfg["x0"] is None else cfg["x0"]
        grid = self.spec.grid
        if not 0.0 <= cfg["t"] <= grid.horizon:
            raise ConfigError(f"must lie in [0, {grid.horizon}]", "t")
        self.t = grid.snap(cfg["t"])
        self.x = Path(grid, np.full((grid.size, self.spec.dimension), x0))
        self.family_values = self._family(cfg["family"])

    def _family(self, fam):
        cs = self.spec.control_space
        if fam == "grid":
            return cs.points
        items = fam.split(",") if isinstance(fam, str) else fam
        arr = np.asarray([_float(v, "family") for v in items if not isinstance(v, str) or v.strip()], float)
        if arr.size == 0 or not all(cs.contains(v) for v in arr):
            raise ConfigError("expected 'grid' or control values inside the control space", "family")
        return arr

    def candidate(self):
        if self.spec.candidate is None:
            raise ConfigError("the problem declares no candidate function", "candidate")
        return self.spec.candidate

    def family(self, t):
        return constant_family(self.spec, t, self.family_values)

    def start_value(self) -> float:
        return float(self.candidate()(self.t, self.x.prefix(self.spec.grid.index(self.t)))[0])

    def points(self, n: int, seed: int, t_max=None):
        if n == 0:
            return [(self.t, self.x)]
        pts, _ = reachable_points(self.spec, self.x, n, seed, t_max=t_max)
        return pts


def verdict(name: str, passed: Optional[bool], detail: str) -> dict:
    return {"name": name, "passed": None if passed is None else bool(passed), "detail": detail}


def _fmt(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and not math.isfinite(v)) else f"{v:.6g}"


# -- commands ---------------------------------------------------------------


def cmd_simulate(cfg, prob: Problem, out: FsPath):
    spec = prob.spec
    a = spec.anchor.a0 if cfg["control"] is None else cfg["control"]
    if not spec.control_space.contains(a):
        raise ConfigError("control value must lie in the control space", "control")
    res = simulate_controlled(spec, prob.t, prob.x, ControlProcess.constant(a, prob.t, spec.anchor.a0),
                              cfg["paths"], cfg["seed"])
    res.write(out, "simulation")
    X = res.ensemble.values
    h, clips = spec.terminal_cost.evaluate(X)
    result = {
        "n_paths": cfg["paths"],
        "grid": spec.grid.to_dict(),
        "control": a,
        "terminal_mean": X[:, -1].mean(axis=0).tolist(),
        "terminal_stderr": (X[:, -1].std(axis=0, ddof=1) / math.sqrt(max(cfg["paths"], 1))).tolist()
        if cfg["paths"] > 1 else [0.0] * spec.dimension,
        "cost_mean": float(h.mean()),
        "clip_count": clips,
        "files": ["simulation.csv", "simulation_noise.csv", "simulation.json"],
    }
    return result, []


def cmd_value(cfg, prob: Problem, out: FsPath):
    est = value_function(prob.spec, prob.t, prob.x, prob.family(prob.t), cfg["paths"], cfg["seed"])
    result = {"estimate": est.to_dict(), "oracle": None}
    verdicts = []
    if prob.bench is not None:
        oracle = prob.bench.oracle_value(prob.t, prob.x)
        gap = est.value - oracle
        result["oracle"] = {"value": oracle, "gap": gap}
        verdicts.append(verdict("oracle_gap", abs(gap) <= 3 * est.stderr + 1e-12,
                                f"V={_fmt(est.value)} oracle={_fmt(oracle)} gap={_fmt(gap)} "
                                f"3se={_fmt(3 * est.stderr)}"))
        verdicts.append(verdict("clipping_inactive", est.clip_count == 0, f"clips={est.clip_count}"))
    return result, verdicts


def cmd_viability(cfg, prob: Problem, out: FsPath):
    spec = prob.spec
    y = prob.start_value() if cfg["y"] is None else cfg["y"]
    query = ViabilityQuery(prob.t, prob.x, y, prob.candidate(), spec.target_set)
    fam = prob.family(prob.t)
    score, best, profile = approx_viability_score(spec, query, fam, cfg["paths"], cfg["seed"], cfg["mode"])
    reporting.write_text(out / "viability_profile.csv", profile.to_csv())
    tol = cfg["tol"]
    certified = profile.certified(tol)
    verdicts = [verdict("approximately_viable", certified,
                        f"score={_fmt(score)} best_control={fam[best].describe()['value']} tol={_fmt(tol)}")]
    necessity = []
    for e in cfg["eps"]:
        rep = test_necessity(spec, query, fam, e, cfg["paths"], cfg["seed"])
        necessity.append(rep)
        verdicts.append(verdict(f"necessity_eps={e:g}", rep["passed"], f"status={rep['status']}"))
    result = {"score": score, "best_control": best, "mode": cfg["mode"], "y": y, "profile": profile.to_dict(),
              "family": [c.describe() for c in fam], "necessity": necessity}
    return result, verdicts


def cmd_tangency(cfg, prob: Problem, out: FsPath):
    spec = prob.spec
    cand = prob.candidate()
    search = SearchConfig(tolerance=cfg["tol"])
    checks = []
    verdicts = []
    for i, (t, x) in enumerate(prob.points(cfg["points"], cfg["seed"])):
        dirs = DirectionSet.from_control_grid(spec, t, x, prob.family_values)
        rep = tangency_derivative_equivalence_check(spec, t, x, cand, dirs, cfg["eps"], search, cfg["paths"],
                                                    cfg["seed"])
        rep["x_t"] = x.values[spec.grid.index(t)].tolist()
        checks.append(rep)
        verdicts.append(verdict(
            f"equivalence[{i}]", rep["agree"],
            f"t={_fmt(rep['t'])} derivative={_fmt(rep['derivative']['value'])} "
            f"derivative_affirmative={rep['derivative_affirmative']} "
            f"tangency_affirmative={rep['tangency_affirmative']}"))
    return {"checks": checks}, verdicts


def cmd_epsilon_solve(cfg, prob: Problem, out: FsPath):
    spec = prob.spec
    cand = prob.candidate()
    y = prob.start_value() if cfg["y"] is None else cfg["y"]
    sols, verdicts, gaps = [], [], []
    for e in sorted(cfg["eps"], reverse=True):
        sol = build_approx_solution(spec, prob.t, prob.x, y, e, SearchConfig(), cfg["paths"], cfg["seed"],
                                    cfg["max_steps"], candidate=cand)
        sub = f"eps_{e:g}"
        sol.write(out / sub)
        row = {"epsilon": e, "directory": sub, "complete": sol.complete, "tau": sol.tau, "steps": len(sol.steps),
               "breakpoints": sol.delay.times, "diagnostic": sol.diagnostic,
               "conditions": {c: sol.condition_report[c]["passed"] for c in ("i", "ii", "iii", "iv", "v", "vi")},
               "gap": None}
        verdicts.append(verdict(f"complete_eps={e:g}", sol.complete, f"tau={_fmt(sol.tau)} steps={len(sol.steps)}"))
        verdicts.append(verdict(f"conditions_eps={e:g}", sol.condition_report["all_passed"],
                                " ".join(f"{c}={'ok' if v else 'FAIL'}" for c, v in row["conditions"].items())))
        if sol.complete:
            g = delayed_vs_true_gap(spec, sol)
            row["gap"] = {"gap_T": g["gap_T"], "stderr_T": g["stderr_T"]}
            gaps.append((e, g["gap_T"], g["stderr_T"]))
        sols.append(row)
    scaling = None
    if len(cfg["eps"]) >= 2:
        if len(gaps) == len(cfg["eps"]):
            eps_arr = [g[0] for g in gaps]
            vals = [g[1] for g in gaps]
            slope = loglog_slope(eps_arr, vals)
            lo, hi = cfg["slope_min"], cfg["slope_max"]
            ok = all(v > 0 for v in vals) and math.isfinite(slope) and lo <= slope <= hi
            scaling = {"slope": slope, "slope_range": [lo, hi], "all_gaps_zero": all(v == 0 for v in vals)}
            detail = f"slope={_fmt(slope)} range=[{lo:g}, {hi:g}]"
            if scaling["all_gaps_zero"]:
                detail += " (every gap is exactly zero; slope undefined)"
            verdicts.append(verdict("gap_slope", ok, detail))
            table = np.array(sorted(gaps), dtype=float)
            buf = "epsilon,gap_T,stderr_T\n" + "".join(",".join(f"{v:.17g}" for v in r) + "\n" for r in table)
            reporting.write_text(out / "epsilon_solve_gap.csv", buf)
        else:
            verdicts.append(verdict("gap_slope", False, "some solutions are incomplete"))
    return {"y": y, "solutions": sols, "gap_scaling": scaling}, verdicts


def _semisolution_verdict(name, rep, max_share):
    c = rep.counts
    n = max(len(rep.points), 1)
    ok = c["fail"] == 0 and c["inconclusive"] <= max_share * n and rep.terminal["passed"]
    return verdict(name, ok, f"pass={c['pass']} inconclusive={c['inconclusive']} fail={c['fail']} "
                             f"terminal={'ok' if rep.terminal['passed'] else 'FAIL'}")


def _run_role(role, prob: Problem, cand, points, eps, tol, n, seed):
    if role == "super":
        return verify_supersolution(prob.spec, cand, points, None, eps, tol, n, seed)
    return verify_subsolution(prob.spec, cand, points, None, prob.family_values, eps, tol, n, seed)


def cmd_verify(cfg, prob: Problem, out: FsPath):
    sign = 1.0 if cfg["role"] == "super" else -1.0
    cand = prob.candidate().shifted(time_coef=sign * cfg["c"])
    points = prob.points(cfg["points"], cfg["seed"])
    rep = _run_role(cfg["role"], prob, cand, points, cfg["eps"], cfg["tol"], cfg["paths"], cfg["seed"])
    _points_csv(out / "verify_points.csv", rep)
    v = _semisolution_verdict(f"{cfg['role']}solution", rep, cfg["inconclusive_max"])
    return {"role": cfg["role"], "shift": sign * cfg["c"], "report": rep.to_dict()}, [v]


def _points_csv(path, rep):
    lines = ["index,t,x_t,estimate,stderr,verdict"]
    for p in rep.points:
        lines.append(f"{p['index']},{p['t']:.17g},{p['x_t'][0]:.17g},{p['estimate']:.17g},{p['stderr']:.17g},"
                     f"{p['verdict']}")
    reporting.write_text(path, "\n".join(lines) + "\n")


def cmd_compare(cfg, prob: Problem, out: FsPath):
    base = prob.candidate()
    c = cfg["c"]
    v_minus, v_plus = base.shifted(time_coef=-c), base.shifted(time_coef=c)
    points = prob.points(cfg["points"], cfg["seed"])
    n_d = cfg["deriv_paths"]
    sub = _run_role("sub", prob, v_minus, points, cfg["eps"], cfg["tol"], n_d, cfg["seed"])
    sup = _run_role("super", prob, v_plus, points, cfg["eps"], cfg["tol"], n_d, cfg["seed"])
    comp = comparison_check(prob.spec, v_minus, v_plus, points, cfg["paths"], cfg["seed"], sub_report=sub,
                            super_report=sup)
    reporting.write_text(out / "comparison.csv", comparison_csv(comp))
    verdicts = [
        _semisolution_verdict("subsolution(v_minus)", sub, 0.0),
        _semisolution_verdict("supersolution(v_plus)", sup, 0.0),
        verdict("comparison", comp["passed"],
                f"violations={comp['violations']} points={len(comp['points'])} "
                f"max_lower={_fmt(comp['max_lower_violation'])} max_upper={_fmt(comp['max_upper_violation'])}"),
    ]
    return {"c": c, "subsolution": sub.to_dict(), "supersolution": sup.to_dict(), "comparison": comp}, verdicts


def cmd_bench(cfg, prob: Problem, out: FsPath):
    if prob.bench is None:
        raise ConfigError("bench needs a benchmark id", "id")
    b = prob.bench
    check = oracle_consistency_check(b, cfg["paths"], cfg["seed"], prob.t, prob.x)
    m, s = cfg["validator_samples"], cfg["seed"]
    vals = {
        "A1": check_A1_nonanticipativity(b.spec, max(m // 10, 1), s).to_dict(),
        "A2": check_A2(b.spec, m, s).to_dict(),
        "H": check_H(b.spec.candidate, b.spec.grid, m, s).to_dict(),
    }
    reporting.write_text(out / "bench_problem.json",
                         json.dumps(benchmark_docs()[b.id], sort_keys=True, indent=2) + "\n")
    bf, oc = check["brute_force"], check["oracle_control"]
    verdicts = [
        verdict("brute_force", bf["passed"], f"V={_fmt(bf['value'])} oracle={_fmt(check['oracle'])} "
                                             f"gap={_fmt(bf['gap'])} 3se={_fmt(3 * bf['stderr'])}"),
        verdict("oracle_control", oc["passed"], f"mean={_fmt(oc['value'])} gap={_fmt(oc['gap'])} "
                                                f"3se={_fmt(3 * oc['stderr'])}"),
        verdict("clipping_inactive", check["clipping"]["passed"], f"clips={check['clipping']['clip_count']}"),
    ]
    verdicts += [verdict(f"check_{k}", v["passed"], "no witness" if v["witness"] is None else "witness recorded")
                 for k, v in vals.items()]
    return {"benchmark": b.to_dict(), "oracle_check": check, "validators": vals}, verdicts


HANDLERS = {
    "simulate": cmd_simulate,
    "value": cmd_value,
    "viability": cmd_viability,
    "tangency": cmd_tangency,
    "epsilon-solve": cmd_epsilon_solve,
    "verify": cmd_verify,
    "compare": cmd_compare,
    "bench": cmd_bench,
}


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meanviab", description="Mean-viability toolkit for path-dependent "
                                                                  "stochastic control.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--id", help="built-in benchmark id (B0..B4)")
        src.add_argument("--problem", help="path to a JSON problem document")
        p.add_argument("--config", help="JSON file of run settings; flags override it")
        p.add_argument("--paths", help="number of Monte Carlo paths")
        p.add_argument("--seed", help="master seed (required)")
        p.add_argument("--threads", help="worker threads; outputs do not depend on it")
        p.add_argument("--out", help="output directory (default $MEANVIAB_OUT or ./meanviab_out)")
        p.add_argument("--t", help="start time")
        p.add_argument("--x0", help="constant start path value")
        p.add_argument("--family", help="'grid' or comma-separated constant controls")
        keys = DEFAULTS[name]
        if "eps" in keys:
            p.add_argument("--eps", help="comma-separated epsilon values")
        if "tol" in keys:
            p.add_argument("--tol", help="tolerance (> 0)")
        if "c" in keys:
            p.add_argument("--c", help="time-shift slope c of the candidate")
        if "role" in keys:
            p.add_argument("--role", help="super or sub")
        if "points" in keys:
            p.add_argument("--points", help="number of reachable sample points (0: the start point only)")
        if "y" in keys:
            p.add_argument("--y", help="level y (default v(t, x))")
        if "mode" in keys:
            p.add_argument("--mode", help="sup_over_s or per_s")
        if "control" in keys:
            p.add_argument("--control", help="constant control value (default the anchor a0)")
        if "max_steps" in keys:
            p.add_argument("--max-steps", dest="max_steps")
        if "deriv_paths" in keys:
            p.add_argument("--deriv-paths", dest="deriv_paths", help="paths per semisolution derivative")
        if "validator_samples" in keys:
            p.add_argument("--validator-samples", dest="validator_samples", help="samples per structural check")
    return parser


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    command = args.command
    try:
        cfg = resolve_config(command, flags)
        prob = Problem(cfg)
        out = FsPath(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        prev = rng.get_threads()
        rng.set_threads(cfg["threads"])
        try:
            result, verdicts = HANDLERS[command](cfg, prob, out)
        finally:
            rng.set_threads(prev)
        doc = reporting.envelope(command, recorded(cfg), verdicts, result)
        reporting.write_json(out / f"{command.replace('-', '_')}.json", doc)
    except (ConfigError, DomainError, StructuralError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MeanViabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for v in verdicts:
        tag = "INCONCLUSIVE" if v["passed"] is None else ("PASS" if v["passed"] else "FAIL")
        print(f"{tag} {command} {v['name']}: {v['detail']}", file=stdout)
    if not verdicts:
        print(f"DONE {command}: wrote {out}", file=stdout)
    return 0 if doc["passed"] else 1


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
