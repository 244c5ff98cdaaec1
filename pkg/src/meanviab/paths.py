"""
Discretised continuous paths, stopped paths and the non-anticipating
pseudo-metric ``|t - t'| + sup_s |x(s ^ t) - x'(s ^ t')|``.

Paths live on a uniform grid ``0, h, 2h, ..., T``.  Path functionals in this
package receive *prefix arrays*: the values of a path on grid indices
``0..k``.  A prefix of length ``k + 1`` stands for the path stopped at
``t_k``; reading index ``j > k`` of a stopped path returns the value at ``k``
(see :func:`at`).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .errors import DomainError, StructuralError

_SNAP_SLACK = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[0, horizon]`` with ``num_steps`` cells."""

    horizon: float
    num_steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise DomainError(f"horizon must be positive and finite, got {self.horizon}")
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise DomainError(f"num_steps must be a positive integer, got {self.num_steps}")
        object.__setattr__(self, "num_steps", int(self.num_steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def step(self) -> float:
        return self.horizon / self.num_steps

    @property
    def size(self) -> int:
        return self.num_steps + 1

    def time(self, k: int) -> float:
        # index-derived, no accumulation drift
        return k * self.horizon / self.num_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.size) * self.horizon / self.num_steps

    def check_time(self, t: float) -> None:
        if not (-_SNAP_SLACK * self.horizon <= t <= self.horizon * (1 + _SNAP_SLACK)):
            raise DomainError(f"time {t} outside [0, {self.horizon}]")

    def index(self, t: float) -> int:
        """Nearest grid index, ties rounded up (round-half-up in index space)."""
        self.check_time(t)
        k = math.floor(t / self.step + 0.5 + _SNAP_SLACK)
        return min(max(k, 0), self.num_steps)

    def floor_index(self, t: float) -> int:
        """Largest grid index whose time does not exceed ``t``."""
        self.check_time(t)
        k = math.floor(t / self.step + _SNAP_SLACK)
        return min(max(k, 0), self.num_steps)

    def snap(self, t: float) -> float:
        return self.time(self.index(t))

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "num_steps": self.num_steps}


def at(x: np.ndarray, k: int) -> np.ndarray:
    """Value of the (possibly stopped) prefix array ``x`` at grid index ``k``.

    ``x`` has shape ``(n, m, d)``; indices past the prefix read the last
    stored value, which is exactly the stopped-path convention.
    """
    return x[:, min(k, x.shape[1] - 1)]


def running_sup_norm(x: np.ndarray) -> np.ndarray:
    """``sup_{j <= k} |x_j|`` for every k; ``x`` has shape ``(n, m, d)``."""
    return np.maximum.accumulate(np.linalg.norm(x, axis=-1), axis=1)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Path:
    """A single path sampled on every point of ``grid``; values shape ``(N+1, d)``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.size:
            raise StructuralError(
                f"path values must have shape ({self.grid.size}, d), got {np.shape(self.values)}"
            )
        if not np.all(np.isfinite(v)):
            raise DomainError("path values must be finite")
        object.__setattr__(self, "values", _freeze(v))

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "Path":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (grid.size, 1)))

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    def prefix(self, k: int) -> np.ndarray:
        """Values on indices ``0..k`` with a leading path axis, shape ``(1, k+1, d)``."""
        return self.values[None, : k + 1]

    def __eq__(self, other):
        if not isinstance(other, Path):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.grid, self.values.tobytes()))

    def to_csv(self) -> str:
        return _rows_to_csv(
            ["t"] + [f"x{i + 1}" for i in range(self.dimension)],
            ([self.grid.time(k), *self.values[k]] for k in range(self.grid.size)),
        )

    def write_csv(self, path) -> None:
        FsPath(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, grid: TimeGrid | None = None) -> "Path":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [list(map(float, r)) for r in rows[1:] if r]
        if header[0] != "t":
            raise StructuralError("path CSV must start with a 't' column")
        data = np.array(body)
        if grid is None:
            grid = TimeGrid(data[-1, 0], len(data) - 1)
        return cls(grid, data[:, 1:])


def _fmt(v: float) -> str:
    return "%.17g" % v


def _rows_to_csv(header, rows) -> str:
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(_fmt(v) if isinstance(v, float) or isinstance(v, np.floating) else str(v) for v in row))
    return "\n".join(out) + "\n"


def stop_path(x: Path, t: float) -> Path:
    """The path ``x`` stopped at ``t`` (snapped to the nearest grid point).

    Only values up to the index of ``t`` are read.
    """
    k = x.grid.index(t)
    v = np.empty_like(x.values)
    v[: k + 1] = x.values[: k + 1]
    v[k + 1 :] = x.values[k]
    return Path(x.grid, v)


def path_distance(t: float, x: Path, t2: float, x2: Path) -> float:
    """``|t - t2| + max_k |x_{k ^ i(t)} - x2_{k ^ i(t2)}|`` over the grid."""
    if x.grid != x2.grid:
        raise StructuralError("paths live on different grids")
    if x.dimension != x2.dimension:
        raise StructuralError("paths have different dimensions")
    k1, k2 = x.grid.index(t), x2.grid.index(t2)
    idx = np.arange(x.grid.size)
    a = x.values[np.minimum(idx, k1)]
    b = x2.values[np.minimum(idx, k2)]
    return abs(t - t2) + float(np.max(np.linalg.norm(a - b, axis=1)))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """A collection of paths on a common grid, stored as one ``(n, N+1, d)`` array."""

    grid: TimeGrid
    values: np.ndarray
    seed_record: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[1] != self.grid.size:
            raise StructuralError(
                f"ensemble values must have shape (n, {self.grid.size}, d), got {v.shape}"
            )
        # read-only view, no copy: ensembles can be large
        v = v.view()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dimension(self) -> int:
        return self.values.shape[2]

    def path(self, i: int) -> Path:
        return Path(self.grid, self.values[i])

    def mean_path(self) -> Path:
        return Path(self.grid, self.values.mean(axis=0))

    def to_csv(self) -> str:
        n, m, d = self.values.shape
        table = np.empty((n * m, 2 + d))
        table[:, 0] = np.repeat(np.arange(n), m)
        table[:, 1] = np.tile(self.grid.times, n)
        table[:, 2:] = self.values.reshape(n * m, d)
        buf = io.StringIO()
        header = ",".join(["path", "t"] + [f"x{j + 1}" for j in range(d)])
        np.savetxt(buf, table, fmt="%.17g", delimiter=",", header=header, comments="")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        FsPath(path).write_text(self.to_csv())
