"""Built-in named families of coefficients, terminal costs and candidate functions.

Each factory takes the time grid, the state dimension and keyword parameters
and returns raw callables with the conventions

* drift ``b(t, x, a) -> (n, d)`` and diffusion ``sigma(t, x, a) -> (n, d, d)``,
* terminal cost ``h(x) -> (n,)``,
* candidate ``v(t, x) -> (n,)``,

where ``x`` is a prefix array of shape ``(n, m, d)`` and ``a`` has shape
``(n,)``.  Every family reads the path only through :func:`meanviab.paths.at`
at the grid index of ``t`` (or of ``T``), so it is non-anticipating whatever
the prefix length.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError
from .paths import TimeGrid, at

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(120)


def _eye(d, scale):
    # scale: (n,) or (n, d) -> (n, d, d) diagonal
    scale = np.asarray(scale, dtype=float)
    if scale.ndim == 1:
        scale = np.repeat(scale[:, None], d, axis=1)
    out = np.zeros(scale.shape[:1] + (d, d))
    idx = np.arange(d)
    out[:, idx, idx] = scale
    return out


def _state(grid, t, x):
    return at(x, grid.index(t))


# -- coefficients ---------------------------------------------------------


def controlled_drift(grid: TimeGrid, d: int, drift_scale=1.0, drift_offset=0.0, sigma=1.0):
    """``b = drift_offset + drift_scale * a``, ``sigma = sigma * I``."""

    def b(t, x, a):
        return np.repeat((drift_offset + drift_scale * np.asarray(a, float))[:, None], d, axis=1)

    def s(t, x, a):
        return _eye(d, np.full(np.shape(a), float(sigma)))

    return b, s


def controlled_vol(grid: TimeGrid, d: int, sigma_min=0.2, sigma_max=1.0, drift=0.0):
    """``b = drift``, ``sigma = (sigma_min + a (sigma_max - sigma_min)) I``."""

    def b(t, x, a):
        return np.full((np.shape(a)[0], d), float(drift))

    def s(t, x, a):
        return _eye(d, sigma_min + np.asarray(a, float) * (sigma_max - sigma_min))

    return b, s


def affine(grid: TimeGrid, d: int, b0=0.0, bx=0.0, ba=0.0, s0=1.0, sx=0.0, sa=0.0):
    """``b = b0 + bx x_t + ba a`` and ``sigma = diag(s0 + sx x_t + sa a)``."""

    def b(t, x, a):
        xt = _state(grid, t, x)
        a = np.asarray(a, float)[:, None]
        return b0 + bx * xt + ba * a

    def s(t, x, a):
        xt = _state(grid, t, x)
        a = np.asarray(a, float)[:, None]
        return _eye(d, s0 + sx * xt + sa * a)

    return b, s


def sine(grid: TimeGrid, d: int, amp=1.0, freq=1.0, ba=0.0, sigma=1.0, sigma_amp=0.0):
    """``b = amp sin(freq x_t) + ba a`` and ``sigma = diag(sigma + sigma_amp sin(x_t))``."""

    def b(t, x, a):
        xt = _state(grid, t, x)
        return amp * np.sin(freq * xt) + ba * np.asarray(a, float)[:, None]

    def s(t, x, a):
        xt = _state(grid, t, x)
        return _eye(d, sigma + sigma_amp * np.sin(xt))

    return b, s


def zero(grid: TimeGrid, d: int):
    def b(t, x, a):
        return np.zeros((np.shape(a)[0], d))

    def s(t, x, a):
        return np.zeros((np.shape(a)[0], d, d))

    return b, s


COEFFICIENT_FAMILIES = {
    "controlled_drift": controlled_drift,
    "controlled_vol": controlled_vol,
    "affine": affine,
    "sine": sine,
    "zero": zero,
}


# -- terminal costs -------------------------------------------------------


def linear_cost(grid: TimeGrid, d: int, weight=1.0, offset=0.0):
    def h(x):
        return weight * at(x, grid.num_steps).sum(axis=1) + offset

    return h


def square_cost(grid: TimeGrid, d: int, scale=1.0):
    def h(x):
        return scale * np.sum(at(x, grid.num_steps) ** 2, axis=1)

    return h


def abs_increment_cost(grid: TimeGrid, d: int, split=0.5):
    """``|x_T - x_{split T}|``."""
    k_mid = grid.index(split * grid.horizon)

    def h(x):
        return np.linalg.norm(at(x, grid.num_steps) - at(x, k_mid), axis=1)

    return h


def constant_cost(grid: TimeGrid, d: int, value=0.0):
    def h(x):
        return np.full(x.shape[0], float(value))

    return h


COST_FAMILIES = {
    "linear": linear_cost,
    "square": square_cost,
    "abs_increment": abs_increment_cost,
    "constant": constant_cost,
}


# -- candidate functions --------------------------------------------------


def _clipped(values, clip):
    return values if clip is None else np.clip(values, -clip, clip)


def constant_candidate(grid: TimeGrid, d: int, value=0.0):
    def v(t, x):
        return np.full(x.shape[0], float(value))

    return v


def linear_candidate(grid: TimeGrid, d: int, scale=1.0, time_coef=0.0, offset=0.0, clip=None):
    """``scale * x_t + time_coef * (T - t) + offset`` (first component)."""
    T = grid.horizon

    def v(t, x):
        return _clipped(scale * _state(grid, t, x)[:, 0] + time_coef * (T - t) + offset, clip)

    return v


def square_candidate(grid: TimeGrid, d: int, scale=1.0, time_coef=0.0, offset=0.0, clip=None):
    """``scale * |x_t|^2 + time_coef * (T - t) + offset``."""
    T = grid.horizon

    def v(t, x):
        xt = _state(grid, t, x)
        return _clipped(scale * np.sum(xt**2, axis=1) + time_coef * (T - t) + offset, clip)

    return v


def gaussian_clip_mean(grid: TimeGrid, d: int, sigma=1.0, clip=10.0, weight=1.0):
    """``E[clip(weight * (x_t + sigma Z sqrt(T - t)))]`` by Gauss-Hermite quadrature."""
    T = grid.horizon

    def v(t, x):
        xt = _state(grid, t, x)[:, 0]
        s = sigma * math.sqrt(max(T - t, 0.0))
        pts = xt[:, None] + math.sqrt(2.0) * s * _GH_NODES[None, :]
        vals = np.clip(weight * pts, -clip, clip)
        return vals @ _GH_WEIGHTS / math.sqrt(math.pi)

    return v


def _folded_normal_mean(mu, s):
    mu = np.asarray(mu, dtype=float)
    if s <= 0:
        return np.abs(mu)
    z = mu / s
    phi = np.exp(-0.5 * z**2) / math.sqrt(2 * math.pi)
    return s * 2 * phi + mu * (2 * ndtr(z) - 1)


def abs_increment_mean(grid: TimeGrid, d: int, sigma=1.0, split=0.5):
    """``E|X_T - X_{split T}|`` for ``dX = sigma dW`` given the path up to t (d = 1)."""
    T = grid.horizon
    k_mid = grid.index(split * T)
    t_mid = grid.time(k_mid)

    def v(t, x):
        k = grid.index(t)
        if k <= k_mid:
            return np.full(x.shape[0], sigma * math.sqrt(2 * (T - t_mid) / math.pi))
        mu = _state(grid, t, x)[:, 0] - at(x, k_mid)[:, 0]
        return _folded_normal_mean(mu, sigma * math.sqrt(T - t))

    return v


CANDIDATE_FAMILIES = {
    "constant": constant_candidate,
    "linear": linear_candidate,
    "square": square_candidate,
    "gaussian_clip_mean": gaussian_clip_mean,
    "abs_increment_mean": abs_increment_mean,
}


def build(registry: dict, kind: str, family: str, grid: TimeGrid, d: int, params: dict):
    try:
        factory = registry[family]
    except KeyError:
        raise ConfigError(
            f"unknown {kind} family {family!r}; expected one of {sorted(registry)}", f"{kind}.family"
        ) from None
    try:
        return factory(grid, d, **(params or {}))
    except TypeError as exc:
        raise ConfigError(str(exc), f"{kind}.params") from None
