"""
Euler-Maruyama simulation of the controlled path-dependent SDE, of the
frozen-coefficient perturbed dynamics used by the tangency tests, and of the
frozen dynamics driven by a shifted (spliced) feedback control.

All simulations run block by block over fixed blocks of
:data:`meanviab.rng.BLOCK_SIZE` paths.  Each block reads its own Philox
stream, so the output does not depend on the number of worker threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Callable, Optional, Union

import numpy as np

from . import rng
from .errors import ConfigError, DomainError, SimulationError, StructuralError
from .paths import Path, PathEnsemble, TimeGrid
from .problem import ProblemSpec

SCHEME = "euler-maruyama"


@dataclass(frozen=True, eq=False)
class ControlProcess:
    """A control in the admissible class started at ``activation_time``.

    ``kind`` is ``"constant"`` (``value``), ``"piecewise"`` (``values`` per
    grid cell, shape ``(N,)`` or per path ``(n, N)``) or ``"feedback"``
    (``rule(t, x_prefix) -> (n,)``).  Cells starting before the activation
    time use the anchor control ``anchor``.
    """

    kind: str
    value: float = 0.0
    values: Optional[np.ndarray] = None
    rule: Optional[Callable] = None
    activation_time: float = 0.0
    anchor: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("constant", "piecewise", "feedback"):
            raise DomainError(f"unknown control kind {self.kind!r}")
        if self.kind == "piecewise":
            if self.values is None:
                raise StructuralError("piecewise control needs values")
            v = np.array(self.values, dtype=float)
            v.setflags(write=False)
            object.__setattr__(self, "values", v)
        if self.kind == "feedback" and self.rule is None:
            raise StructuralError("feedback control needs a rule")

    @classmethod
    def constant(cls, value: float, activation_time: float = 0.0, anchor: Optional[float] = None):
        return cls("constant", value=float(value), activation_time=activation_time,
                   anchor=float(value) if anchor is None else float(anchor), label=f"const({value:g})")

    @property
    def is_feedback(self) -> bool:
        return self.kind == "feedback"

    @property
    def per_path(self) -> bool:
        return self.kind == "piecewise" and self.values.ndim == 2

    def check(self, spec: ProblemSpec) -> None:
        cs = spec.control_space
        if self.kind == "constant" and not cs.contains(self.value):
            raise DomainError(f"control value {self.value} outside A")
        if self.kind == "piecewise":
            if self.values.shape[-1] != spec.grid.num_steps:
                raise StructuralError("piecewise control needs one value per grid cell")
            if not cs.contains(self.values):
                raise DomainError("piecewise control leaves A")

    def cell_values(self, spec: ProblemSpec, k: int, n: int, rows: slice, reader: Optional[np.ndarray]) -> np.ndarray:
        """Control on cell ``[t_k, t_{k+1})`` for the paths in ``rows``; ``reader`` is the prefix the rule sees."""
        grid = spec.grid
        if grid.time(k) < self.activation_time - 1e-12 * grid.horizon:
            return np.full(n, self.anchor)
        if self.kind == "constant":
            return np.full(n, self.value)
        if self.kind == "piecewise":
            v = self.values
            return np.full(n, v[k]) if v.ndim == 1 else np.asarray(v[rows, k], dtype=float)
        a = np.asarray(self.rule(grid.time(k), reader), dtype=float).reshape(-1)
        return spec.control_space.project(np.broadcast_to(a, (n,)))

    def describe(self) -> dict:
        out = {"kind": self.kind, "activation_time": self.activation_time, "anchor": self.anchor}
        if self.kind == "constant":
            out["value"] = self.value
        elif self.kind == "piecewise" and self.values.ndim == 1:
            out["values"] = self.values.tolist()
        elif self.kind == "piecewise":
            out["per_path_shape"] = list(self.values.shape)
        if self.label:
            out["label"] = self.label
        return out


@dataclass(frozen=True, eq=False)
class PerturbationProcess:
    """Piecewise-constant drift/diffusion perturbation ``(p, q)`` per grid cell.

    ``p`` has shape ``(N, d)`` (shared) or ``(n, N, d)`` (per path); ``q`` has
    shape ``(N, d, d)`` or ``(n, N, d, d)``.  Cells outside ``[activation_time, T]``
    must carry zeros (the anchor pair is taken to be zero there).
    """

    p: np.ndarray
    q: np.ndarray
    activation_time: float = 0.0

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        q = np.array(self.q, dtype=float)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise DomainError("perturbation values must be finite")
        if p.ndim not in (2, 3) or q.ndim != p.ndim + 1:
            raise StructuralError("perturbation shapes must be (N, d)/(N, d, d) or (n, N, d)/(n, N, d, d)")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @classmethod
    def zero(cls, grid: TimeGrid, d: int, activation_time: float = 0.0) -> "PerturbationProcess":
        return cls(np.zeros((grid.num_steps, d)), np.zeros((grid.num_steps, d, d)), activation_time)

    @classmethod
    def constant(cls, grid: TimeGrid, p, q, start: float, stop: float) -> "PerturbationProcess":
        """Constant ``(p, q)`` on the cells of ``[start, stop)``, zero elsewhere."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        d = p.shape[0]
        q = np.asarray(q, dtype=float).reshape(d, d)
        k0, k1 = grid.index(start), grid.index(stop)
        P = np.zeros((grid.num_steps, d))
        Q = np.zeros((grid.num_steps, d, d))
        P[k0:k1] = p
        Q[k0:k1] = q
        return cls(P, Q, start)

    @property
    def per_path(self) -> bool:
        return self.p.ndim == 3

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.p) or np.any(self.q))

    def check(self, grid: TimeGrid, d: int) -> None:
        if self.p.shape[-2:] != (grid.num_steps, d) or self.q.shape[-3:] != (grid.num_steps, d, d):
            raise StructuralError("perturbation does not match grid and dimension")
        k0 = grid.index(self.activation_time)
        if np.any(self.p[..., :k0, :]) or np.any(self.q[..., :k0, :, :]):
            raise StructuralError("perturbation support must lie in [activation_time, T]")

    def cell_energy(self) -> np.ndarray:
        """``E|p_k|^2 + E|q_k|_F^2`` per cell, shape ``(N,)``."""
        e = np.sum(self.p**2, axis=-1) + np.sum(self.q**2, axis=(-2, -1))
        return e.mean(axis=0) if self.per_path else e

    def energy(self, grid: TimeGrid, start: float, stop: float) -> float:
        """``E int_start^stop (|p_r|^2 + |q_r|^2) dr``."""
        k0, k1 = grid.index(start), grid.index(stop)
        return float(np.sum(self.cell_energy()[k0:k1]) * grid.step)

    def p_cell(self, k, rows):
        return self.p[rows, k] if self.per_path else self.p[k]

    def q_cell(self, k, rows):
        return self.q[rows, k] if self.per_path else self.q[k]

    def restricted(self, grid: TimeGrid, start: float, stop: float) -> "PerturbationProcess":
        k0, k1 = grid.index(start), grid.index(stop)
        p, q = np.zeros_like(self.p), np.zeros_like(self.q)
        p[..., k0:k1, :] = self.p[..., k0:k1, :]
        q[..., k0:k1, :, :] = self.q[..., k0:k1, :, :]
        return PerturbationProcess(p, q, start)

    def describe(self) -> dict:
        if self.per_path:
            return {"per_path": True, "shape": list(self.p.shape), "activation_time": self.activation_time}
        return {"p": self.p.tolist(), "q": self.q.tolist(), "activation_time": self.activation_time}


@dataclass(frozen=True, eq=False)
class SimulationResult:
    ensemble: PathEnsemble
    driving_noise: PathEnsemble
    metadata: dict = field(default_factory=dict)

    def sidecar(self) -> dict:
        g = self.ensemble.grid
        return {
            "seed": self.metadata.get("seed"),
            "scheme": SCHEME,
            "n_paths": self.ensemble.n_paths,
            "grid": g.to_dict(),
            **{k: v for k, v in self.metadata.items() if k != "seed"},
        }

    def write(self, directory, stem: str = "simulation") -> dict:
        d = FsPath(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.ensemble.write_csv(d / f"{stem}.csv")
        self.driving_noise.write_csv(d / f"{stem}_noise.csv")
        meta = self.sidecar()
        (d / f"{stem}.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
        return meta


# -- core integrator ------------------------------------------------------

XInput = Union[Path, np.ndarray]


def _initial(x: XInput, k0: int, grid: TimeGrid, d: int) -> np.ndarray:
    """Initial prefix as an array of shape ``(1 or n, k0 + 1, d)``."""
    if isinstance(x, Path):
        if x.grid != grid:
            raise StructuralError("initial path lives on a different grid")
        arr = x.values[None, : k0 + 1]
    else:
        arr = np.asarray(x, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[1] < k0 + 1:
            raise StructuralError("initial path array must have shape (n, >= k+1, d)")
        arr = arr[:, : k0 + 1]
    if arr.shape[2] != d:
        raise StructuralError(f"initial path has dimension {arr.shape[2]}, problem has {d}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("initial path must be finite")
    return arr


def _check_start(spec: ProblemSpec, t: float, allow_T: bool = False) -> int:
    spec.grid.check_time(t)
    k0 = spec.grid.index(t)
    if k0 >= spec.grid.num_steps and not allow_T:
        raise DomainError(f"start time {t} must be < T")
    return k0


def _noise(spec, seed, label, antithetic, noise=None):
    """Noise increments as a per-block callable: block -> (rows, N, d)."""
    grid, d = spec.grid, spec.dimension

    def fetch(a, b):
        if noise is not None:
            return noise[a:b]
        z = rng._block_normals(seed, label, a // rng.BLOCK_SIZE, (grid.num_steps, d), antithetic)
        return z[: b - a] * np.sqrt(grid.step)

    return fetch


def integrate(
    spec: ProblemSpec,
    t: float,
    x: XInput,
    control: ControlProcess,
    n_paths: int,
    seed: int,
    *,
    stop: Optional[float] = None,
    pert: Optional[PerturbationProcess] = None,
    freeze: Union[str, Callable[[int], int]] = "running",
    splice: Optional[Path] = None,
    label: str = "W",
    antithetic: bool = False,
    reducer: Optional[Callable] = None,
    threads: Optional[int] = None,
    noise: Optional[np.ndarray] = None,
):
    """Run the Euler-Maruyama scheme block by block.

    ``freeze`` selects the path argument of the coefficients on cell ``k``:
    ``"running"`` uses the state stopped at ``t_k``, ``"initial"`` the initial
    path stopped at ``t``, and a callable maps ``k`` to the stopping index.
    With ``splice`` set, feedback controls read
    ``1_[0,t) splice + 1_[t,inf) (splice_t + W - W_t)`` instead of the state.
    ``reducer(X, W, rows)`` maps each block to the value collected (``W``
    is ``None`` unless a splice needs it); by
    default the full ``(X, W)`` arrays are returned.  ``noise`` may carry
    increments already drawn with :func:`draw_noise` for the same stream.
    """
    grid, d = spec.grid, spec.dimension
    if int(n_paths) != n_paths or n_paths < 1:
        raise ConfigError(f"n_paths must be >= 1, got {n_paths}", "n_paths")
    rng.check_seed(seed)
    k0 = _check_start(spec, t)
    k1 = grid.num_steps if stop is None else grid.index(stop)
    if k1 < k0:
        raise DomainError("stop time precedes start time")
    if antithetic and n_paths % 2:
        raise ConfigError("antithetic sampling needs an even number of paths", "n_paths")
    control.check(spec)
    if pert is not None:
        pert.check(grid, d)
    init = _initial(x, k0, grid, d)
    if init.shape[0] not in (1, n_paths):
        raise StructuralError("per-path initial prefixes must match n_paths")
    if splice is not None:
        splice_prefix = _initial(splice, k0, grid, d)
    coeff = spec.coefficients
    if noise is not None and noise.shape[:1] != (n_paths,):
        raise StructuralError("precomputed noise must have one row per path")
    fetch = _noise(spec, seed, label, antithetic, noise)

    fast = (freeze == "initial" and not control.is_feedback and not control.per_path
            and init.shape[0] == 1)
    if fast:
        # frozen path, shared control: coefficients are deterministic per cell
        b_cells = np.zeros((grid.num_steps, d))
        s_cells = np.zeros((grid.num_steps, d, d))
        for k in range(k0, k1):
            a = control.cell_values(spec, k, 1, slice(0, 1), None)
            b_cells[k] = coeff.drift(grid.time(k), init, a)[0]
            s_cells[k] = coeff.diffusion(grid.time(k), init, a)[0]

    def block(a_, b_):
        rows = slice(a_, b_)
        m = b_ - a_
        dW = fetch(a_, b_)
        X = np.empty((m, grid.size, d))
        X[:, : k0 + 1] = init if init.shape[0] == 1 else init[rows]
        W = None
        if splice is not None or reducer is None:
            W = np.zeros((m, grid.size, d))
            W[:, 1:] = np.cumsum(dW, axis=1)
        if fast and (pert is None or not pert.per_path):
            inc = np.zeros((m, grid.num_steps, d))
            cells = slice(k0, k1)
            drift = b_cells[cells]
            vol = s_cells[cells]
            if pert is not None:
                drift = drift + pert.p[cells]
                vol = vol + pert.q[cells]
            inc[:, cells] = drift[None] * grid.step + np.einsum("kij,nkj->nki", vol, dW[:, cells])
            X[:, k0 + 1 : k1 + 1] = X[:, k0 : k0 + 1] + np.cumsum(inc[:, cells], axis=1)
        else:
            if splice is not None:
                R = np.empty_like(X)
                R[:, : k0 + 1] = splice_prefix
                R[:, k0 + 1 :] = splice_prefix[:, k0 : k0 + 1] + W[:, k0 + 1 :] - W[:, k0 : k0 + 1]
            cur = X[:, k0]
            for k in range(k0, k1):
                tk = grid.time(k)
                if freeze == "running":
                    j = k
                elif freeze == "initial":
                    j = k0
                else:
                    j = int(freeze(k))
                    if not k0 <= j <= k:
                        raise StructuralError(f"delay index {j} outside [{k0}, {k}]")
                reader = (R if splice is not None else X)[:, : k + 1]
                a = control.cell_values(spec, k, m, rows, reader)
                xs = X[:, : j + 1]
                if fast:
                    bk, sk = b_cells[k][None], s_cells[k][None]
                else:
                    bk = coeff.drift(tk, xs, a)
                    sk = coeff.diffusion(tk, xs, a)
                if pert is not None:
                    bk = bk + pert.p_cell(k, rows)
                    sk = sk + pert.q_cell(k, rows)
                if d == 1:
                    cur = cur + bk * grid.step + sk[:, :, 0] * dW[:, k]
                else:
                    cur = cur + bk * grid.step + np.einsum("nij,nj->ni", np.broadcast_to(sk, (m, d, d)), dW[:, k])
                X[:, k + 1] = cur
                if not np.all(np.isfinite(cur)):
                    raise SimulationError(f"non-finite state at step {k + 1}", step_index=k + 1)
        if k1 < grid.num_steps:
            X[:, k1 + 1 :] = X[:, k1 : k1 + 1]
        if not np.all(np.isfinite(X)):
            bad = int(np.argmax(~np.all(np.isfinite(X), axis=(0, 2))))
            raise SimulationError(f"non-finite state at step {bad}", step_index=bad)
        if reducer is not None:
            return reducer(X, W, rows)
        return X, W

    return rng.map_blocks(block, n_paths, threads)


def draw_noise(spec: ProblemSpec, n_paths: int, seed: int, label: str = "W", antithetic: bool = False) -> np.ndarray:
    """The increments :func:`integrate` would draw for ``(seed, label)``, for reuse across runs."""
    return rng.brownian_increments(spec.grid.num_steps, spec.grid.step, spec.dimension, n_paths, seed, label,
                                   antithetic)


def _result(spec, parts, seed, label, antithetic, extra) -> SimulationResult:
    X = np.concatenate([p[0] for p in parts], axis=0)
    W = np.concatenate([p[1] for p in parts], axis=0)
    record = {"seed": seed, "stream": label, "stream_id": rng.stream_id(label), "antithetic": antithetic}
    meta = {"seed": seed, "stream": label, "antithetic": antithetic, **extra}
    return SimulationResult(PathEnsemble(spec.grid, X, record), PathEnsemble(spec.grid, W, record), meta)


def simulate_controlled(spec: ProblemSpec, t: float, x: XInput, a: ControlProcess, n_paths: int, seed: int,
                        *, label: str = "W", antithetic: bool = False, stop: Optional[float] = None) -> SimulationResult:
    """Paths of the controlled SDE started from ``x`` stopped at ``t``.

    Coefficients read the running stopped state; each path equals ``x`` on ``[0, t]``.
    """
    parts = integrate(spec, t, x, a, n_paths, seed, label=label, antithetic=antithetic, stop=stop)
    return _result(spec, parts, seed, label, antithetic,
                   {"dynamics": "controlled", "t": spec.grid.snap(t), "control": a.describe()})


def simulate_perturbed(spec: ProblemSpec, t: float, x: XInput, a: ControlProcess, pert: PerturbationProcess,
                       delta: float, n_paths: int, seed: int, *, label: str = "W",
                       antithetic: bool = False) -> SimulationResult:
    """Frozen-coefficient dynamics on ``[t, t + delta]`` with perturbation ``(p, q)`` added.

    Coefficients are evaluated at the initial path stopped at ``t`` and never
    see the simulated state; paths are held constant after ``t + delta``.
    """
    grid = spec.grid
    k0 = _check_start(spec, t)
    kd = grid.index(delta)
    if kd < 1 or k0 + kd > grid.num_steps:
        raise DomainError(f"delta {delta} must be a positive grid multiple with t + delta <= T")
    parts = integrate(spec, t, x, a, n_paths, seed, stop=grid.time(k0 + kd), pert=pert, freeze="initial",
                      label=label, antithetic=antithetic)
    return _result(spec, parts, seed, label, antithetic,
                   {"dynamics": "perturbed", "t": grid.snap(t), "delta": grid.time(kd), "control": a.describe()})


def simulate_frozen_shifted(spec: ProblemSpec, t: float, x: XInput, ring_x: Path, a: ControlProcess,
                            n_paths: int, seed: int, *, label: str = "W", antithetic: bool = False) -> SimulationResult:
    """Controlled dynamics where feedback controls read the spliced path.

    The control sees ``ring_x`` before ``t`` and ``ring_x_t + W - W_t``
    afterwards; the state itself follows the controlled SDE from ``x``.
    """
    parts = integrate(spec, t, x, a, n_paths, seed, splice=ring_x, label=label, antithetic=antithetic)
    return _result(spec, parts, seed, label, antithetic,
                   {"dynamics": "frozen_shifted", "t": spec.grid.snap(t), "control": a.describe()})


def terminal_values(spec: ProblemSpec, t: float, x: XInput, a: ControlProcess, n_paths: int, seed: int,
                    *, label: str = "W", antithetic: bool = False,
                    noise: Optional[np.ndarray] = None) -> tuple[np.ndarray, int]:
    """Clipped ``h(X^{t,x,a})`` per path and the clip count, without storing the ensemble."""

    def reduce(X, W, rows):
        return spec.terminal_cost.evaluate(X)

    parts = integrate(spec, t, x, a, n_paths, seed, label=label, antithetic=antithetic, reducer=reduce, noise=noise)
    return np.concatenate([p[0] for p in parts]), int(sum(p[1] for p in parts))


# -- moment bound ---------------------------------------------------------


def loglog_slope(xs, ys) -> float:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    ok = (xs > 0) & (ys > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(xs[ok]), np.log(ys[ok]), 1)[0])


def moment_bound_check(spec: ProblemSpec, t: float, x: XInput, delta_list, n_paths: int, seed: int,
                       control: Optional[ControlProcess] = None, label: str = "moment",
                       slope_range=(0.8, 1.2)) -> dict:
    """``E sup_{s <= t+delta} |X_s - x_{s ^ t}|^2`` per delta and its log-log slope.

    The pass criterion (slope in ``slope_range``, moments below the fitted
    ``C L_b^2 delta``) applies only when the diffusion is non-degenerate along
    the simulated paths; otherwise ``passed`` is ``None``.
    """
    grid = spec.grid
    deltas = [float(v) for v in delta_list]
    if any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise DomainError("delta_list must be strictly increasing")
    k0 = _check_start(spec, t)
    kds = [grid.index(dl) for dl in deltas]
    for dl, kd in zip(deltas, kds):
        if abs(grid.time(kd) - dl) > 1e-9 * grid.horizon or kd < 1 or k0 + kd > grid.num_steps:
            raise DomainError(f"delta {dl} must be a positive grid multiple with t + delta <= T")
    control = control or ControlProcess.constant(spec.anchor.a0, t)
    stop = grid.time(k0 + kds[-1])
    coeff = spec.coefficients

    def reduce(X, W, rows):
        dev = np.linalg.norm(X[:, k0:] - X[:, k0 : k0 + 1], axis=-1) ** 2
        run = np.maximum.accumulate(dev, axis=1)
        sig = 0.0
        for k in range(k0, k0 + kds[-1]):
            a = control.cell_values(spec, k, X.shape[0], rows, X[:, : k + 1])
            sig = max(sig, float(np.max(np.abs(coeff.diffusion(grid.time(k), X[:, : k + 1], a)))))
        return run[:, kds].sum(axis=0), X.shape[0], sig

    parts = integrate(spec, t, x, control, n_paths, seed, stop=stop, label=label, reducer=reduce)
    moments = sum(p[0] for p in parts) / n_paths
    degenerate = max(p[2] for p in parts) == 0.0
    dts = [grid.time(kd) for kd in kds]
    slope = loglog_slope(dts, moments)
    L2 = spec.L_b**2
    C = float(np.max(moments / (L2 * np.asarray(dts))))
    if degenerate:
        passed = None
    else:
        passed = bool(slope_range[0] <= slope <= slope_range[1]
                      and np.all(moments <= C * L2 * np.asarray(dts) * (1 + 1e-12)))
    return {
        "deltas": dts,
        "moments": moments.tolist(),
        "slope": slope,
        "fitted_C": C,
        "L_b": spec.L_b,
        "diffusion_degenerate": degenerate,
        "slope_range": list(slope_range),
        "passed": passed,
    }
