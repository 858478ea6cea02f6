"""Control sets and control processes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .stochastics import ConfigurationError, TimeGrid


class ControlDomainError(ValueError):
    """A control value lies outside the control set U."""

    code = "E_CONTROL_DOMAIN"


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Either a finite list of points or a box in R^m with a uniform grid.

    ``origin`` is the designated element "0" of U and ``|u|_U`` is the
    Euclidean distance to it.
    """

    kind: str
    points: np.ndarray | None = None
    low: np.ndarray | None = None
    high: np.ndarray | None = None
    resolution: int = 21
    origin: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "finite":
            pts = np.atleast_1d(np.asarray(self.points, dtype=float))
            pts = pts.reshape(len(pts), -1)
            if len(pts) == 0:
                raise ValueError("finite control set must be nonempty")
            object.__setattr__(self, "points", pts)
            origin = pts[0] if self.origin is None else np.atleast_1d(np.asarray(self.origin, float))
        elif self.kind == "box":
            low = np.atleast_1d(np.asarray(self.low, dtype=float))
            high = np.atleast_1d(np.asarray(self.high, dtype=float))
            if low.shape != high.shape or np.any(low > high):
                raise ValueError("box bounds must have equal shape and low <= high")
            if self.resolution < 1:
                raise ValueError("resolution must be >= 1")
            object.__setattr__(self, "low", low)
            object.__setattr__(self, "high", high)
            origin = np.clip(np.zeros_like(low), low, high) if self.origin is None \
                else np.atleast_1d(np.asarray(self.origin, float))
        else:
            raise ValueError(f"unknown control set kind {self.kind!r}")
        object.__setattr__(self, "origin", origin)
        if not self.contains(origin):
            raise ValueError("designated origin must belong to U")

    @classmethod
    def finite(cls, points, origin=None) -> "ControlSet":
        return cls("finite", points=points, origin=origin)

    @classmethod
    def box(cls, low, high, resolution: int = 21, origin=None) -> "ControlSet":
        return cls("box", low=low, high=high, resolution=resolution, origin=origin)

    @property
    def dim(self) -> int:
        return self.points.shape[1] if self.kind == "finite" else self.low.shape[0]

    def grid(self) -> np.ndarray:
        """Enumerated members, shape ``(k, m)``; a box yields a tensor grid."""
        if self.kind == "finite":
            return self.points.copy()
        axes = [np.linspace(lo, hi, self.resolution) for lo, hi in zip(self.low, self.high)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def contains(self, u, atol: float = 1e-12) -> np.ndarray | bool:
        u = np.asarray(u, dtype=float)
        u = u.reshape(u.shape[:-1] + (self.dim,)) if u.ndim else u.reshape(1)
        if self.kind == "box":
            ok = np.all((u >= self.low - atol) & (u <= self.high + atol), axis=-1)
        else:
            d = np.abs(u[..., None, :] - self.points).max(axis=-1)
            ok = np.any(d <= atol, axis=-1)
        return bool(ok) if np.ndim(ok) == 0 else ok

    def require(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if not np.all(self.contains(u)):
            raise ControlDomainError(f"control value outside U: {u!r}")
        return u

    def project(self, u) -> np.ndarray:
        """Closest member of U (box: clipping; finite: nearest point, lowest index on ties)."""
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, self.low, self.high)
        d = np.linalg.norm(u[..., None, :] - self.points, axis=-1)
        return self.points[np.argmin(d, axis=-1)]

    def norm(self, u) -> np.ndarray:
        return np.linalg.norm(np.asarray(u, dtype=float) - self.origin, axis=-1)

    def to_dict(self) -> dict:
        if self.kind == "finite":
            return {"kind": "finite", "points": self.points.tolist(), "origin": self.origin.tolist()}
        return {"kind": "box", "low": self.low.tolist(), "high": self.high.tolist(),
                "resolution": self.resolution, "origin": self.origin.tolist()}


@dataclass(frozen=True)
class Spike:
    """Spike data: the control equals ``u`` on the grid interval [τ, τ+ε)."""

    tau: float
    eps: float
    u: np.ndarray

    def slice(self, grid: TimeGrid) -> slice:
        return grid.spike_slice(self.tau, self.eps)


@dataclass(frozen=True, eq=False)
class Control:
    """A control process on the grid.

    Either ``values`` (shape ``(steps+1, m)`` for an open-loop deterministic
    control or ``(paths, steps+1, m)`` for a realized adapted process) or a
    ``feedback`` map ``(t, x) -> u`` evaluated along the state. ``spike``
    records the variation that produced the control, if any.
    """

    values: np.ndarray | None = None
    feedback: Callable | None = None
    spike: Spike | None = None
    clipped_fraction: float = 0.0

    def __post_init__(self):
        if (self.values is None) == (self.feedback is None):
            raise ConfigurationError("a control needs exactly one of values or feedback")
        if self.values is not None:
            v = np.asarray(self.values, dtype=float)
            if v.ndim == 1:
                v = v[:, None]
            object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value, grid: TimeGrid) -> "Control":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(values=np.broadcast_to(v, (grid.steps + 1, v.shape[0])).copy())

    @property
    def is_feedback(self) -> bool:
        return self.feedback is not None

    def at(self, k: int):
        """Open-loop value at index ``k`` (``(m,)`` or ``(paths, m)``)."""
        if self.values is None:
            raise ConfigurationError("feedback control has no stored values; solve the state first")
        return self.values[..., k, :]
