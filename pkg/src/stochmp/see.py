"""Forward solvers for the controlled and linear stochastic evolution equations.

All equations are integrated with the semi-implicit Euler–Maruyama scheme

    (I − dt·A(t_k)) y_{k+1} = y_k + dt·(drift_k) + (B(t_k) y_k + diffusion_k)·ΔW_k,

implicit only in the (stiff) operator A. Everything else, including the
nonlinear coefficients and linearised terms like ``f_x·y``, is explicit.
Solvers work on one path (increments of shape ``(steps,)``) or on an
ensemble (``(paths, steps)``); ensemble values have shape
``(paths, steps+1, n)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .controls import Control
from .operators import EvolutionOperatorPair
from .stochastics import (ConfigurationError, McConfig, TimeGrid, WienerPath, _blocks,
                          reduce_mean, sample_ensemble)

LABELS = ("state", "linear", "z", "z_eps", "x1", "x2", "xs1", "xs2", "z_spike")


class SingularStepError(np.linalg.LinAlgError):
    code = "E_SINGULAR_STEP"


@dataclass(eq=False)
class StatePath:
    """Solution values at the grid points, index 0 holding the initial condition."""

    values: np.ndarray
    grid: TimeGrid
    label: str = "state"
    control: Control | None = None
    wiener: WienerPath | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if self.values.shape[-2] != self.grid.steps + 1:
            raise ValueError("path length must be steps + 1")

    @property
    def is_ensemble(self) -> bool:
        return self.values.ndim == 3

    @property
    def paths(self) -> int:
        return self.values.shape[0] if self.is_ensemble else 1

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def at(self, k: int) -> np.ndarray:
        return self.values[..., k, :]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=-1)

    def __sub__(self, other: "StatePath") -> np.ndarray:
        return self.values - other.values


# -- linear algebra helpers ---------------------------------------------------

def expand(m: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Reshape a per-path matrix batch ``(P, n, n)`` to broadcast against ``(P, ..., n)``."""
    if m.ndim == 2:
        return m
    return m.reshape(m.shape[:1] + (1,) * (y.ndim - 2) + m.shape[1:])


def matvec(m: np.ndarray, y: np.ndarray) -> np.ndarray:
    if m.ndim == 2:
        return y @ m.T
    return np.einsum("...ij,...j->...i", expand(m, y), y)


class Stepper:
    """Applies ``(I − dt·A_k)⁻¹`` and ``B_k`` for a fixed operator pair and grid.

    For a constant pair the resolvent is factored once. Random operators
    receive the Wiener values of the ensemble (``w_values``).
    """

    def __init__(self, pair: EvolutionOperatorPair, grid: TimeGrid, w_values=None):
        self.pair = pair
        self.grid = grid
        self.w = w_values
        self._const = None
        if pair.is_constant and not pair.random:
            a, b = pair.at(0.0)
            self._const = (self._resolvent(a), b)

    def _resolvent(self, a):
        n = a.shape[-1]
        m = np.eye(n) - self.grid.dt * a
        try:
            return np.linalg.inv(m)
        except np.linalg.LinAlgError as exc:
            raise SingularStepError(
                "I - dt*A is singular; A violates coercivity or dt >= 1/K") from exc

    def ops(self, k: int):
        """Return ``(R_k, B_k)`` with ``R_k = (I − dt A(t_k))⁻¹``."""
        if self._const is not None:
            return self._const
        w = None if self.w is None else self.w[..., k]
        a, b = self.pair.at(self.grid.time(k), w)
        return self._resolvent(a), b


def integrate(
    stepper: Stepper,
    dw: np.ndarray,
    y0,
    k0: int = 0,
    k_end: int | None = None,
    drift: Callable | None = None,
    diffusion: Callable | None = None,
    fx: Callable | None = None,
    gx: Callable | None = None,
    store: bool = True,
    observe: Callable | None = None,
) -> np.ndarray:
    """March the scheme from index ``k0`` to ``k_end`` on increments ``dw`` of shape ``(P, steps)``.

    ``y0`` is ``(n,)`` or ``(P, ..., n)``; extra middle axes carry several
    solutions on the same path. ``fx``/``gx`` return explicit linear
    drift/diffusion matrices at index k, ``drift``/``diffusion`` return
    additive terms ``(k, y) -> array``. ``observe(k, y)`` sees the state at
    every index ``k0 .. k_end``. Returns the stored path ``(P, steps+1, ..., n)``
    (zero before ``k0``) or the final state.
    """
    grid = stepper.grid
    dt = grid.dt
    k_end = grid.steps if k_end is None else k_end
    p = dw.shape[0]
    y0 = np.asarray(y0, dtype=float)
    if y0.ndim == 1:
        y0 = np.broadcast_to(y0, (p,) + y0.shape)
    if y0.shape[0] != p:
        raise ConfigurationError(f"initial value has {y0.shape[0]} paths, increments have {p}")
    y = np.array(y0, dtype=float)
    out = None
    if store:
        out = np.zeros((p, grid.steps + 1) + y.shape[1:])
        out[:, k0] = y
    shape_w = (p,) + (1,) * (y.ndim - 1)
    for k in range(k0, k_end):
        if observe is not None:
            observe(k, y)
        r, b = stepper.ops(k)
        diff = matvec(b, y)
        drift_term = None
        if fx is not None:
            drift_term = matvec(fx(k), y)
        if drift is not None:
            d = drift(k, y)
            drift_term = d if drift_term is None else drift_term + d
        if gx is not None:
            diff = diff + matvec(gx(k), y)
        if diffusion is not None:
            diff = diff + diffusion(k, y)
        rhs = y + diff * dw[:, k].reshape(shape_w)
        if drift_term is not None:
            rhs = rhs + dt * drift_term
        y = matvec(r, rhs)
        if store:
            out[:, k + 1] = y
    if observe is not None:
        observe(k_end, y)
    return out if store else y


def _increments(path: WienerPath) -> tuple[np.ndarray, bool]:
    dw = path.increments
    single = dw.ndim == 1
    return (dw[None, :] if single else dw), single


def _wrap(values, path, label, single, control=None) -> StatePath:
    return StatePath(values[0] if single else values, path.grid, label, control,
                     wiener=path)


def _stepper(pair, path):
    w = path.values if pair.random else None
    if w is not None and w.ndim == 1:
        w = w[None, :]
    return Stepper(pair, path.grid, w)


def _forcing(a, single):
    """Turn an array ``(..., steps+1, n)`` or a callable ``k -> array`` into ``(k, y) -> array``."""
    if a is None:
        return None
    if callable(a):
        return lambda k, y: a(k)
    arr = np.asarray(a, dtype=float)
    if single and arr.ndim == 2:
        arr = arr[None]
    return lambda k, y: arr[..., k, :]


# -- public solvers ------------------------------------------------------------

def solve_linear(pair: EvolutionOperatorPair, y0, path: WienerPath, a=None, b=None) -> StatePath:
    """Solve ``dy = (Ay + a)dt + (By + b)dW`` from ``y(0) = y0``."""
    dw, single = _increments(path)
    vals = integrate(_stepper(pair, path), dw, y0,
                     drift=_forcing(a, single), diffusion=_forcing(b, single))
    return _wrap(vals, path, "linear", single)


def solve_state(problem, control: Control, path: WienerPath) -> StatePath:
    """Solve the controlled equation ``dx = (Ax + f)dt + (Bx + g)dW``.

    A feedback control is evaluated at the current state, projected onto U,
    and the realized control process is attached to the returned path.
    """
    dw, single = _increments(path)
    grid = path.grid
    p = dw.shape[0]
    m = problem.control_set.dim
    u_store = np.zeros((p, grid.steps + 1, m))
    clipped = 0
    total = 0

    def control_at(k, y):
        nonlocal clipped, total
        if control.is_feedback:
            raw = np.asarray(control.feedback(grid.time(k), y), dtype=float).reshape(p, m)
            u = problem.control_set.project(raw)
            clipped += int(np.count_nonzero(np.any(u != raw, axis=-1)))
            total += p
        else:
            u = np.broadcast_to(control.at(k), (p, m))
        u_store[:, k] = u
        return u

    def drift(k, y):
        return problem.f(grid.time(k), y, control_at(k, y))

    def diffusion(k, y):
        return problem.g(grid.time(k), y, u_store[:, k])

    def observe(k, y):
        if k == grid.steps:
            control_at(k, y)

    vals = integrate(_stepper(problem.pair, path), dw, problem.x0,
                     drift=drift, diffusion=diffusion, observe=observe)
    realized = Control(values=u_store[0] if single else u_store,
                       spike=control.spike,
                       clipped_fraction=clipped / total if total else 0.0)
    return _wrap(vals, path, "state", single, realized)


def solve_z(tau: float, xi, pair: EvolutionOperatorPair, path: WienerPath) -> StatePath:
    """Homogeneous linear flow started from ``z(τ) = ξ``; zero before τ.

    Off-grid τ is snapped to the nearest grid point with a warning.
    """
    dw, single = _increments(path)
    k0 = path.grid.index(tau, snap=True)
    vals = integrate(_stepper(pair, path), dw, xi, k0=k0)
    return _wrap(vals, path, "z", single)


def solve_z_eps(tau: float, xi, eps: float, pair: EvolutionOperatorPair, path: WienerPath) -> StatePath:
    """Flow from zero at τ driven by the noise forcing ``ε^{-1/2}·1_{[τ,τ+ε)}·ξ``."""
    grid = path.grid
    if eps < grid.dt:
        raise ConfigurationError(f"eps = {eps} is below the grid step {grid.dt}")
    sl = grid.spike_slice(tau, eps)
    dw, single = _increments(path)
    xi = np.asarray(xi, dtype=float)
    kick = xi / np.sqrt(eps)
    if single and kick.ndim > 1:
        raise ConfigurationError("random xi needs an ensemble of paths")

    def diffusion(k, y):
        return kick if sl.start <= k < sl.stop else 0.0

    vals = integrate(_stepper(pair, path), dw, np.zeros_like(kick), k0=sl.start, diffusion=diffusion)
    return _wrap(vals, path, "z_eps", single)


# -- spike variations ------------------------------------------------------------

def _bar_controls(bar: StatePath, p: int, single: bool):
    u = bar.control.values
    if single or u.ndim == 2:
        u = np.broadcast_to(u, (p,) + u.shape[-2:])
    return u


def _eps_controls(ueps: Control, grid, p: int):
    u = ueps.values
    if u.ndim == 2:
        u = np.broadcast_to(u, (p,) + u.shape)
    return u


def _delta_range(ueps: Control, grid):
    if ueps.spike is not None:
        return ueps.spike.slice(grid)
    return slice(0, grid.steps)


def _linearisation(problem, bar_vals, u_bar, grid):
    def fx(k):
        return problem.f_x(grid.time(k), bar_vals[:, k], u_bar[:, k])

    def gx(k):
        return problem.g_x(grid.time(k), bar_vals[:, k], u_bar[:, k])

    return fx, gx


def solve_first_variation(problem, bar: StatePath, ueps: Control, path: WienerPath) -> StatePath:
    """Solve the first-variation equation for x₁ along ``bar``.

    Coefficients ``f̄_x``, ``ḡ_x`` are evaluated on the reference pair and the
    forcings ``f^Δ``, ``g^Δ`` are nonzero only where the controls differ.
    """
    dw, single = _increments(path)
    grid = path.grid
    p = dw.shape[0]
    xb = bar.values[None] if single else bar.values
    ub = _bar_controls(bar, p, single)
    ue = _eps_controls(ueps, grid, p)
    sl = _delta_range(ueps, grid)
    fx, gx = _linearisation(problem, xb, ub, grid)

    def delta(fn):
        def term(k, y):
            if not sl.start <= k < sl.stop:
                return 0.0
            t = grid.time(k)
            return fn(t, xb[:, k], ue[:, k]) - fn(t, xb[:, k], ub[:, k])
        return term

    vals = integrate(_stepper(problem.pair, path), dw, np.zeros(problem.dim), fx=fx, gx=gx,
                     drift=delta(problem.f), diffusion=delta(problem.g))
    return _wrap(vals, path, "x1", single)


def solve_second_variation(problem, x1: StatePath, bar: StatePath, ueps: Control,
                           path: WienerPath) -> StatePath:
    """Solve the second-variation equation for x₂ (quadratic terms in x₁ and ``f_x^Δ x₁``)."""
    dw, single = _increments(path)
    grid = path.grid
    p = dw.shape[0]
    xb = bar.values[None] if single else bar.values
    x1v = x1.values[None] if single else x1.values
    ub = _bar_controls(bar, p, single)
    ue = _eps_controls(ueps, grid, p)
    sl = _delta_range(ueps, grid)
    fx, gx = _linearisation(problem, xb, ub, grid)

    def source(hess, jac):
        def term(k, y):
            t = grid.time(k)
            out = 0.0
            if hess is not None:
                out = 0.5 * hess(t, xb[:, k], ub[:, k], x1v[:, k], x1v[:, k])
            if sl.start <= k < sl.stop:
                dj = jac(t, xb[:, k], ue[:, k]) - jac(t, xb[:, k], ub[:, k])
                out = out + matvec(dj, x1v[:, k])
            return out
        return term

    vals = integrate(_stepper(problem.pair, path), dw, np.zeros(problem.dim), fx=fx, gx=gx,
                     drift=source(problem.f_xx, problem.f_x),
                     diffusion=source(problem.g_xx, problem.g_x))
    return _wrap(vals, path, "x2", single)


# -- moments ---------------------------------------------------------------------

@dataclass
class MomentReport:
    """Empirical ``sup_t E‖y(t)‖^{2n}`` with the forcing integrals α and β."""

    exponent2n: int
    sup_moment: float
    sup_stderr: float
    sup_index: int
    alpha: float
    beta: float
    mean: np.ndarray = field(repr=False)
    stderr: np.ndarray = field(repr=False)


def _forcing_norm_integral(f, grid, exponent2n, power):
    if f is None:
        return 0.0
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    mom = np.mean(np.linalg.norm(arr[:, :-1], axis=-1) ** exponent2n, axis=0)
    return float(np.sum(mom ** (power / exponent2n)) * grid.dt)


def moment_sup(ensemble: StatePath, exponent2n: int, a=None, b=None) -> MomentReport:
    """Max over grid points of the sample mean of ``‖y(t_k)‖^{2n}``, 2n ∈ {2, 4}.

    ``a`` and ``b`` (arrays ``(paths, steps+1, n)``) give
    ``α = ∫(E‖a‖^{2n})^{1/2n}dt`` and ``β = ∫(E‖b‖^{2n})^{2/2n}dt``.
    """
    if exponent2n not in (2, 4):
        raise ConfigurationError("exponent2n must be 2 or 4")
    vals = ensemble.values
    if vals.size == 0:
        raise ConfigurationError("empty ensemble")
    if vals.ndim == 2:
        vals = vals[None]
    powers = np.linalg.norm(vals, axis=-1) ** exponent2n
    if len(powers) >= 2:
        mean, se = reduce_mean(powers)
    else:
        mean, se = powers[0], np.zeros(powers.shape[1])
    k = int(np.argmax(mean))
    return MomentReport(
        exponent2n=exponent2n,
        sup_moment=float(mean[k]),
        sup_stderr=float(se[k]),
        sup_index=k,
        alpha=_forcing_norm_integral(a, ensemble.grid, exponent2n, 1),
        beta=_forcing_norm_integral(b, ensemble.grid, exponent2n, 2),
        mean=mean,
        stderr=se,
    )


def energy_increments(path: StatePath) -> np.ndarray:
    """Per-step relative change ``(‖y_{k+1}‖ − ‖y_k‖)/‖y_k‖`` (zero where ``y_k = 0``)."""
    nrm = path.norms()
    prev = nrm[..., :-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(prev > 0, (nrm[..., 1:] - prev) / prev, 0.0)
    return rel


def warn_if_clipped(control: Control, threshold: float = 0.01) -> None:
    if control is not None and control.clipped_fraction > threshold:
        warnings.warn(f"feedback control clipped on {control.clipped_fraction:.2%} of (t, ω)",
                      stacklevel=2)


def _spike_errors(pair, tau, xi, eps_list, path):
    """Per-path ``‖z_ε(τ+ε) − ε^{-1/2}ΔW ξ‖⁴``, shape ``(P, len(eps_list))``."""
    dw, _ = _increments(path)
    grid = path.grid
    stepper = _stepper(pair, path)
    out = np.empty((dw.shape[0], len(eps_list)))
    for j, eps in enumerate(eps_list):
        if eps < grid.dt:
            raise ConfigurationError(f"eps = {eps} is below the grid step {grid.dt}")
        sl = grid.spike_slice(tau, eps)
        kick = xi / np.sqrt(eps)
        end = integrate(stepper, dw, np.zeros_like(xi), k0=sl.start, k_end=sl.stop,
                        diffusion=lambda k, y: kick, store=False)
        incr = dw[:, sl].sum(axis=1)[:, None]
        out[:, j] = np.sum((end - incr * kick) ** 2, axis=-1) ** 2
    return out


def _rate_rows(eps_list, err):
    rows = []
    for j, eps in enumerate(eps_list):
        m, s = reduce_mean(err[:, j])
        rows.append((eps, float(m), float(s)))
    logs = np.log([[r[0], r[1]] for r in rows])
    slope = float(np.polyfit(logs[:, 0], logs[:, 1], 1)[0])
    return rows, slope


def _eps_values(eps_list):
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 2:
        raise ConfigurationError("a rate needs at least two eps values")
    return eps_list


def spike_rate_study(pair: EvolutionOperatorPair, tau: float, xi, eps_list, path: WienerPath):
    """Fourth moment of ``z_ε(τ+ε) − ε^{-1/2}(W_{τ+ε} − W_τ)ξ`` over ε on one ensemble.

    Returns rows ``(eps, mean, stderr)`` and the least-squares log-log slope.
    """
    eps_list = _eps_values(eps_list)
    xi = np.asarray(xi, dtype=float)
    return _rate_rows(eps_list, _spike_errors(pair, tau, xi, eps_list, path))


def spike_rate_mc(pair: EvolutionOperatorPair, tau: float, xi, eps_list,
                  grid: TimeGrid, mc: McConfig):
    """As :func:`spike_rate_study`, streaming ``mc.paths`` paths block by block.

    Fine grids keep the smallest spike resolved without holding the full
    ensemble in memory. Blocks are reduced in path order.
    """
    eps_list = _eps_values(eps_list)
    xi = np.asarray(xi, dtype=float)
    parts = []
    for start, stop in _blocks(mc.paths, mc.block, 0):
        path = sample_ensemble(grid, mc.with_paths(stop - start), start=start)
        parts.append(_spike_errors(pair, tau, xi, eps_list, path))
    return _rate_rows(eps_list, np.concatenate(parts, axis=0))
