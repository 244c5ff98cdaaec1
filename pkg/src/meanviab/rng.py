"""Counter-based, label-addressed Gaussian streams.

Every Monte Carlo draw in the package comes from a Philox stream keyed by
``(seed, label, block)``.  Paths are grouped in fixed blocks of
:data:`BLOCK_SIZE`; path ``i`` always reads block ``i // BLOCK_SIZE`` at
offset ``i % BLOCK_SIZE`` and every block draws the full time grid.  The
increments of a path therefore depend only on ``(seed, label, i)``: not on
``n_paths``, the start time, or how many worker threads are used.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import ConfigError

BLOCK_SIZE = 8192

_threads = 1


def set_threads(n: int) -> None:
    """Set the worker count used by :func:`map_blocks` (results do not depend on it)."""
    global _threads
    if n < 1:
        raise ConfigError("thread count must be >= 1", "threads")
    _threads = int(n)


def get_threads() -> int:
    return _threads


def check_seed(seed) -> int:
    if isinstance(seed, bool) or int(seed) != seed or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}", "seed")
    return int(seed)


def stream_id(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def block_rng(seed: int, label: str, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=check_seed(seed), spawn_key=(stream_id(label), block))
    return np.random.Generator(np.random.Philox(ss))


def block_ranges(n: int):
    return [(s, min(s + BLOCK_SIZE, n)) for s in range(0, n, BLOCK_SIZE)]


def map_blocks(fn, n: int, threads: int | None = None) -> list:
    """Apply ``fn(start, stop)`` to every fixed block, in block order."""
    ranges = block_ranges(n)
    threads = _threads if threads is None else threads
    if threads <= 1 or len(ranges) <= 1:
        return [fn(a, b) for a, b in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: fn(*r), ranges))


def _block_normals(seed, label, block, shape, antithetic):
    rng = block_rng(seed, label, block)
    if not antithetic:
        return rng.standard_normal((BLOCK_SIZE,) + shape)
    half = rng.standard_normal((BLOCK_SIZE // 2,) + shape)
    z = np.empty((BLOCK_SIZE,) + shape)
    z[0::2] = half
    z[1::2] = -half
    return z


def brownian_increments(
    num_steps: int,
    step: float,
    dim: int,
    n_paths: int,
    seed: int,
    label: str,
    antithetic: bool = False,
) -> np.ndarray:
    """Increments ``W_{k+1} - W_k`` for all grid cells, shape ``(n_paths, num_steps, dim)``.

    With ``antithetic=True`` paths ``2j`` and ``2j+1`` carry opposite increments.
    """
    if n_paths < 1:
        raise ConfigError(f"n_paths must be >= 1, got {n_paths}", "n_paths")
    if antithetic and n_paths % 2:
        raise ConfigError("antithetic sampling needs an even number of paths", "n_paths")
    check_seed(seed)
    scale = np.sqrt(step)

    def one(a, b):
        z = _block_normals(seed, label, a // BLOCK_SIZE, (num_steps, dim), antithetic)
        return z[: b - a] * scale

    return np.concatenate(map_blocks(one, n_paths), axis=0)


def uniform_block(seed: int, label: str, shape) -> np.ndarray:
    """Uniform draws for validators and samplers (single stream)."""
    return block_rng(seed, label, 0).random(shape)


def normal_block(seed: int, label: str, shape) -> np.ndarray:
    return block_rng(seed, label, 0).standard_normal(shape)


def pair_standard_error(values: np.ndarray, antithetic: bool) -> float:
    """Standard error of ``values.mean()``, using pair means for antithetic draws."""
    v = np.asarray(values, dtype=float)
    n = v.shape[0]
    if antithetic and n >= 4 and n % 2 == 0:
        pairs = 0.5 * (v[0::2] + v[1::2])
        return float(pairs.std(ddof=1) / np.sqrt(pairs.shape[0]))
    if n < 2:
        return 0.0
    return float(v.std(ddof=1) / np.sqrt(n))
