"""Wiener paths on [0, 1], reproducible per-path random streams, and Monte Carlo means.

Every path owns a counter-based Philox stream keyed by ``(seed, path_index)``,
so a path's increments never depend on how many other paths are drawn or on
the number of workers. Gaussians come from the inverse normal CDF applied to
53-bit uniforms in (0, 1). Antithetic pairs ``(2j, 2j+1)`` share the stream of
``j`` with the second member negated.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtri

log = logging.getLogger(__name__)

_TWO_M53 = 2.0**-53
DEFAULT_BLOCK = 8192


class ConfigurationError(ValueError):
    """Invalid experiment configuration (grid, spike, ε, path counts)."""

    code = "E_CONFIG"


class OffGridError(ConfigurationError):
    code = "E_OFF_GRID"


class NonFiniteError(FloatingPointError):
    """A Monte Carlo functional returned a non-finite value."""

    code = "E_NON_FINITE"

    def __init__(self, path_index: int, value: float):
        super().__init__(f"non-finite value {value!r} on path {path_index}")
        self.path_index = path_index
        self.value = value


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k·dt`` on the fixed horizon [0, 1]."""

    steps: int = 512

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigurationError(f"steps must be a positive integer, got {self.steps}")

    t_start = 0.0
    t_end = 1.0

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def time(self, k: int) -> float:
        return k * self.dt

    def index(self, t: float, *, snap: bool = False) -> int:
        """Grid index of ``t``; off-grid times raise unless ``snap`` is set."""
        x = float(t) * self.steps
        k = int(round(x))
        if not 0 <= k <= self.steps:
            raise ConfigurationError(f"time {t} outside [0, 1]")
        if abs(x - k) > 1e-9:
            if not snap:
                raise OffGridError(f"time {t} is not a grid point of a {self.steps}-step grid")
            warnings.warn(f"time {t} snapped to grid point {k * self.dt}", stacklevel=3)
        return k

    def steps_for(self, eps: float) -> int:
        """Number of grid steps in an interval of length ``eps`` (must be a multiple of dt)."""
        x = float(eps) * self.steps
        m = int(round(x))
        if abs(x - m) > 1e-9:
            raise OffGridError(f"length {eps} is not a multiple of dt = {self.dt}")
        return m

    def spike_slice(self, tau: float, eps: float) -> slice:
        """Half-open index range of the spike interval [τ, τ+ε)."""
        k0 = self.index(tau)
        m = self.steps_for(eps)
        if k0 + m > self.steps:
            raise ConfigurationError(f"spike [{tau}, {tau}+{eps}) leaves [0, 1]")
        return slice(k0, k0 + m)


@dataclass(frozen=True, eq=False)
class WienerPath:
    """Increments ``ΔW_k`` of one path (or of several, with a leading path axis)."""

    increments: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape[-1] != self.grid.steps:
            raise ConfigurationError(
                f"{inc.shape[-1]} increments for a {self.grid.steps}-step grid")
        object.__setattr__(self, "increments", inc)

    @property
    def paths(self) -> int:
        return 1 if self.increments.ndim == 1 else self.increments.shape[0]

    @property
    def values(self) -> np.ndarray:
        """``W_{t_k}``, k = 0..steps, with ``W_0 = 0``."""
        w = np.cumsum(self.increments, axis=-1)
        pad = [(0, 0)] * (w.ndim - 1) + [(1, 0)]
        return np.pad(w, pad)

    def __getitem__(self, item) -> "WienerPath":
        return WienerPath(self.increments[item], self.grid)


@dataclass(frozen=True)
class McConfig:
    paths: int = 100_000
    seed: int = 0
    antithetic: bool = False
    n_jobs: int = 1
    block: int = DEFAULT_BLOCK

    def __post_init__(self):
        if self.paths < 2:
            raise ConfigurationError("at least two paths are needed for a standard error")
        if self.antithetic and self.paths % 2:
            raise ConfigurationError("antithetic sampling needs an even number of paths")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in 64 bits")

    def with_paths(self, paths: int) -> "McConfig":
        return McConfig(paths, self.seed, self.antithetic, self.n_jobs, self.block)


# -- sampling ----------------------------------------------------------------

def _stream_normals(seed: int, stream: int, steps: int) -> np.ndarray:
    bg = np.random.Philox(key=int(seed), counter=[0, 0, int(stream), 0])
    bits = bg.random_raw(steps)
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53
    return ndtri(u)


def sample_path(grid: TimeGrid, seed: int, index: int, antithetic: bool = False) -> WienerPath:
    """Increments of path ``index``: a pure function of ``(seed, index, grid)``."""
    if index < 0:
        raise ConfigurationError("path index must be non-negative")
    stream, sign = (index // 2, -1.0 if index % 2 else 1.0) if antithetic else (index, 1.0)
    z = _stream_normals(seed, stream, grid.steps)
    return WienerPath(sign * np.sqrt(grid.dt) * z, grid)


def _sample_block(grid: TimeGrid, seed: int, start: int, stop: int, antithetic: bool) -> np.ndarray:
    out = np.empty((stop - start, grid.steps))
    if antithetic:
        for i in range(start, stop):
            stream, sign = i // 2, (-1.0 if i % 2 else 1.0)
            if i % 2 and i - 1 >= start:
                out[i - start] = -out[i - 1 - start]
            else:
                out[i - start] = sign * _stream_normals(seed, stream, grid.steps)
    else:
        for i in range(start, stop):
            out[i - start] = _stream_normals(seed, i, grid.steps)
    out *= np.sqrt(grid.dt)
    return out


def _blocks(paths: int, block: int, start: int = 0):
    return [(s, min(s + block, start + paths)) for s in range(start, start + paths, block)]


def sample_ensemble(grid: TimeGrid, mc: McConfig, start: int = 0) -> WienerPath:
    """Increments of paths ``start .. start + mc.paths - 1``, shape ``(paths, steps)``."""
    blocks = _blocks(mc.paths, mc.block, start)
    work = lambda se: _sample_block(grid, mc.seed, se[0], se[1], mc.antithetic)  # noqa: E731
    if mc.n_jobs > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(mc.n_jobs) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    return WienerPath(np.concatenate(parts, axis=0), grid)


# -- estimation --------------------------------------------------------------

def reduce_mean(values, antithetic: bool = False) -> tuple[np.ndarray | float, np.ndarray | float]:
    """Mean and standard error over the leading (path) axis, in fixed order.

    With antithetic pairs the standard error is computed from pair averages
    (the pairs, not the paths, are independent), and the mean is the
    average of pair sums, so an odd functional averages to exactly zero.
    """
    v = np.asarray(values, dtype=float)
    bad = ~np.isfinite(v)
    if bad.any():
        idx = int(np.argwhere(bad.reshape(len(v), -1).any(axis=1))[0, 0])
        raise NonFiniteError(idx, float(v[idx].flat[0]) if v.ndim > 1 else float(v[idx]))
    p = v.shape[0]
    if antithetic:
        pairs = 0.5 * (v[0::2] + v[1::2])
        mean = pairs.sum(axis=0) / pairs.shape[0]
        se = pairs.std(axis=0, ddof=1) / np.sqrt(pairs.shape[0])
    else:
        mean = v.sum(axis=0) / p
        se = v.std(axis=0, ddof=1) / np.sqrt(p)
    if np.ndim(mean) == 0:
        return float(mean), float(se)
    return mean, se


def mc_estimate(
    functional: Callable[[WienerPath], np.ndarray],
    grid: TimeGrid,
    mc: McConfig,
    vectorized: bool = True,
) -> tuple[float, float]:
    """Monte Carlo mean and standard error of ``functional`` over ``mc.paths`` paths.

    A vectorized functional receives a block of paths and returns one value
    per path; otherwise it is called on single paths. Blocks are fixed by
    ``mc.block`` and concatenated in path order, so the result does not
    depend on ``mc.n_jobs``.
    """
    blocks = _blocks(mc.paths, mc.block)

    def work(se):
        w = WienerPath(_sample_block(grid, mc.seed, se[0], se[1], mc.antithetic), grid)
        if vectorized:
            return np.asarray(functional(w), dtype=float)
        return np.array([functional(w[i]) for i in range(se[1] - se[0])], dtype=float)

    if mc.n_jobs > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(mc.n_jobs) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    return reduce_mean(np.concatenate(parts, axis=0), mc.antithetic)
