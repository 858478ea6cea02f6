"""Hamiltonian, spike variations, second-order expansions and the maximum condition.

The checker evaluates, for each tested time τ and control value u,

    E[ΔH(τ, u)] + ½E⟨g^Δ(τ), P_τ g^Δ(τ)⟩,

where ``ΔH(τ,u) = H(τ,x̄,u,p,q) − H(τ,x̄,ū,p,q)`` and
``g^Δ(τ) = g(τ,x̄(τ),u) − g(τ,x̄(τ),ū(τ))``. The g-difference is taken at
τ throughout (one displayed formula of the source writes ``g(t, x̄(t), u)``
in its place, which is read as a typo). The condition is checked in its
averaged form over ω.

Outside the spike a spiked control equals the realized reference control
along x̄; a feedback rule is never re-evaluated on the perturbed state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsee import AdjointPair, solve_adjoint_regression
from .controls import Control, Spike
from .riesz import RieszOperator, StudyTable, problem_tuple, riesz_matrix
from .see import (
    StatePath,
    Stepper,
    integrate,
    solve_first_variation,
    solve_second_variation,
    solve_state,
)
from .stochastics import (
    ConfigurationError,
    McConfig,
    TimeGrid,
    WienerPath,
    _blocks,
    reduce_mean,
    sample_ensemble,
)

DEFAULT_TAUS = (0.125, 0.25, 0.5, 0.75)
DEFAULT_EPS = (2**-3, 2**-4, 2**-5, 2**-6)
DECAY = 0.75


# -- Hamiltonian and cost --------------------------------------------------------------

def hamiltonian(t, x, u, p, q, problem) -> np.ndarray | float:
    """``H = l + ⟨p, f⟩ + ⟨q, g⟩``; ``u`` must lie in U."""
    problem.control_set.require(u)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    u2 = np.broadcast_to(np.atleast_1d(np.asarray(u, dtype=float)), x2.shape[:-1] + (problem.control_dim,))
    p2 = np.broadcast_to(np.asarray(p, dtype=float), x2.shape)
    q2 = np.broadcast_to(np.asarray(q, dtype=float), x2.shape)
    val = (problem.l(t, x2, u2) + np.einsum("pi,pi->p", p2, problem.f(t, x2, u2))
           + np.einsum("pi,pi->p", q2, problem.g(t, x2, u2)))
    return float(val[0]) if single else val


def pathwise_cost(problem, state: StatePath) -> np.ndarray:
    """``Σ_k dt·l(t_k, x_k, u_k) + h(x_N)`` per path (left-point rule)."""
    x = state.values if state.is_ensemble else state.values[None]
    u = np.broadcast_to(state.control.values, x.shape[:-1] + (state.control.values.shape[-1],))
    grid = state.grid
    run = np.zeros(len(x))
    for k in range(grid.steps):
        run = run + grid.dt * problem.l(grid.time(k), x[:, k], u[:, k])
    return run + problem.h(x[:, -1])


def cost(problem, control: Control, mc: McConfig, grid: TimeGrid | None = None) -> tuple[float, float]:
    """Monte Carlo ``J(u) = E∫l dt + E h(x(1))``, block by block."""
    grid = grid or TimeGrid()
    parts = []
    for s, e in _blocks(mc.paths, mc.block):
        w = sample_ensemble(grid, McConfig(e - s, mc.seed, mc.antithetic, 1, mc.block), start=s)
        parts.append(pathwise_cost(problem, solve_state(problem, control, w)))
    return reduce_mean(np.concatenate(parts), mc.antithetic)


# -- spikes -------------------------------------------------------------------------------

def spike_control(ubar: Control, tau: float, eps: float, u, grid: TimeGrid, control_set=None) -> Control:
    """``u`` on the grid interval ``[τ, τ+ε)`` and ``ū`` elsewhere.

    ``ubar`` must carry values (a realized or open-loop control). ``ε = 0``
    returns ``ubar`` itself.
    """
    if ubar.values is None:
        raise ConfigurationError("spike needs a realized control; solve the state first")
    if eps == 0:
        return ubar
    sl = grid.spike_slice(tau, eps)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if control_set is not None:
        control_set.require(u)
    vals = np.array(ubar.values, copy=True)
    vals[..., sl, :] = u
    return Control(values=vals, spike=Spike(float(tau), float(eps), u))


def second_order_term(g_delta, riesz) -> float:
    """``½⟨g^Δ, P_τ g^Δ⟩``."""
    mat = riesz.matrix if isinstance(riesz, RieszOperator) else np.atleast_2d(np.asarray(riesz, float))
    g = np.atleast_1d(np.asarray(g_delta, dtype=float))
    if g.shape[-1] != mat.shape[0]:
        raise ValueError(f"g_delta has dimension {g.shape[-1]}, P has {mat.shape[0]}")
    return float(0.5 * g @ mat @ g)


# -- expansion checks ------------------------------------------------------------------------

def _decreasing(values, factor=DECAY) -> bool:
    return all(b <= factor * a for a, b in zip(values, values[1:]))


@dataclass
class ExpansionTable:
    """Rows ``(eps, remainder1, stderr1, gap2_over_eps, stderr2)``."""

    rows: list
    remainder_decreasing: bool
    gap_decreasing: bool

    @property
    def passed(self) -> bool:
        return self.remainder_decreasing and self.gap_decreasing

    columns = ("eps", "remainder1", "stderr1", "gap2_over_eps", "stderr2")


def _reference(problem, ubar: Control, w: WienerPath) -> StatePath:
    return solve_state(problem, ubar, w)


def expansion_check(problem, ubar: Control, tau: float, u, eps_list, mc: McConfig,
                    grid: TimeGrid | None = None) -> ExpansionTable:
    """Second-order expansion remainders on common random numbers.

    ``remainder1 = sup_t Ê‖x^ε − x̄ − x₁ − x₂‖²/ε²`` and
    ``gap2 = J(u^ε) − J(ū) − [first and second order expansion of the cost]``.
    Each must decrease by at least 25% per halving of ε.
    """
    grid = grid or TimeGrid()
    w = sample_ensemble(grid, mc)
    bar = _reference(problem, ubar, w)
    base_cost = pathwise_cost(problem, bar)
    x = bar.values
    ub = bar.control.values
    rows = []
    for eps in eps_list:
        ueps = spike_control(bar.control, tau, eps, u, grid, problem.control_set)
        xe = solve_state(problem, ueps, w)
        x1 = solve_first_variation(problem, bar, ueps, w)
        x2 = solve_second_variation(problem, x1, bar, ueps, w)
        xi = xe.values - x - x1.values - x2.values
        m, s = reduce_mean(np.sum(xi * xi, axis=-1))
        k = int(np.argmax(m))
        rem, rem_se = m[k] / eps**2, s[k] / eps**2
        y12 = x1.values + x2.values
        rhs = np.zeros(len(x))
        for kk in range(grid.steps):
            t = grid.time(kk)
            xk, uk = x[:, kk], ub[:, kk]
            l_delta = problem.l(t, xk, ueps.values[:, kk]) - problem.l(t, xk, uk)
            lxx = np.broadcast_to(problem.l_xx(t, xk, uk), (len(x), problem.dim, problem.dim))
            rhs = rhs + grid.dt * (l_delta + np.einsum("pi,pi->p", problem.l_x(t, xk, uk), y12[:, kk])
                                   + 0.5 * np.einsum("pi,pij,pj->p", x1.values[:, kk], lxx, x1.values[:, kk]))
        hxx = np.broadcast_to(problem.h_xx(x[:, -1]), (len(x), problem.dim, problem.dim))
        rhs = rhs + np.einsum("pi,pi->p", problem.h_x(x[:, -1]), y12[:, -1]) \
            + 0.5 * np.einsum("pi,pij,pj->p", x1.values[:, -1], hxx, x1.values[:, -1])
        gap, gap_se = reduce_mean(pathwise_cost(problem, xe) - base_cost - rhs)
        rows.append((float(eps), float(rem), float(rem_se), float(abs(gap) / eps), float(gap_se / eps)))
    return ExpansionTable(rows, _decreasing([r[1] for r in rows]), _decreasing([r[3] for r in rows]))


# -- maximum condition ---------------------------------------------------------------------------

@dataclass
class MpResidualTable:
    """Rows ``(tau, u, first, second, total, stderr)`` with ``total = first + second``."""

    rows: list
    abstol: float
    columns = ("tau", "u", "first", "second", "total", "stderr")

    def __post_init__(self):
        self.rows = [(t, u, f, s, f + s, se) for t, u, f, s, _, se in self.rows]

    def violations(self) -> list:
        return [r for r in self.rows if r[4] < -(3.0 * r[5] + self.abstol)]

    @property
    def passed(self) -> bool:
        return not self.violations()

    def worst_row(self):
        return min(self.rows, key=lambda r: r[4] + 3.0 * r[5]) if self.rows else None

    def as_array(self) -> np.ndarray:
        out = []
        for t, u, f, s, tot, se in self.rows:
            out.append([t, *np.atleast_1d(u), f, s, tot, se])
        return np.array(out, dtype=float)


def mp_residual(problem, bar: StatePath, adjoint: AdjointPair, riesz_factory: Callable,
                tau_grid=DEFAULT_TAUS, u_grid=None) -> MpResidualTable:
    """Averaged maximum-condition residuals over the ``(τ, u)`` grid.

    ``riesz_factory(τ)`` returns the estimated ``P_τ``. Standard errors
    combine the path spread of ``ΔH + ½⟨g^Δ, P̂ g^Δ⟩`` with the entry-wise
    errors of ``P̂``.
    """
    grid = bar.grid
    u_grid = problem.control_set.grid() if u_grid is None else np.atleast_2d(u_grid)
    x = bar.values if bar.is_ensemble else bar.values[None]
    ub = np.broadcast_to(bar.control.values, x.shape[:-1] + (problem.control_dim,))
    raw = []
    scale = 0.0
    for tau in tau_grid:
        k = grid.index(tau)
        t = grid.time(k)
        riesz = riesz_factory(t)
        xk, ubk, pk, qk = x[:, k], ub[:, k], adjoint.p[:, k], adjoint.q[:, k]
        h_bar = _ham(problem, t, xk, ubk, pk, qk)
        g_bar = problem.g(t, xk, ubk)
        for u in u_grid:
            uu = np.broadcast_to(u, ubk.shape)
            problem.control_set.require(u)
            dh = _ham(problem, t, xk, uu, pk, qk) - h_bar
            gd = problem.g(t, xk, uu) - g_bar
            sec = 0.5 * np.einsum("pi,ij,pj->p", gd, riesz.matrix, gd)
            first, _ = reduce_mean(dh)
            second, _ = reduce_mean(sec)
            _, se = reduce_mean(dh + sec)
            ggt = np.mean(np.einsum("pi,pj->pij", gd, gd), axis=0)
            se_p = 0.5 * float(np.sqrt(np.sum((ggt * riesz.stderr) ** 2)))
            raw.append((float(t), np.array(u, dtype=float), first, second, 0.0, float(np.hypot(se, se_p))))
            scale = max(scale, abs(first))
    return MpResidualTable(raw, 1e-6 * (1.0 + scale))


def _ham(problem, t, x, u, p, q):
    return (problem.l(t, x, u) + np.einsum("pi,pi->p", p, problem.f(t, x, u))
            + np.einsum("pi,pi->p", q, problem.g(t, x, u)))


@dataclass
class MpVerdict:
    table: MpResidualTable
    reference: StatePath = field(repr=False)
    adjoint: AdjointPair = field(repr=False)
    riesz: dict = field(repr=False)
    cost: tuple = (np.nan, np.nan)

    @property
    def passed(self) -> bool:
        return self.table.passed


def check_maximum_principle(problem, control: Control, mc: McConfig, grid: TimeGrid | None = None,
                            tau_grid=DEFAULT_TAUS, u_grid=None, riesz_mc: McConfig | None = None,
                            adjoint: str = "regression") -> MpVerdict:
    """Full pipeline: reference paths, adjoint, ``P_τ`` per tested τ, residual table."""
    grid = grid or TimeGrid()
    w = sample_ensemble(grid, mc)
    bar = solve_state(problem, control, w)
    if adjoint == "riccati":
        from .bsee import solve_adjoint_riccati

        adj = solve_adjoint_riccati(problem, bar)
    else:
        adj = solve_adjoint_regression(problem, bar)
    tup = problem_tuple(problem, bar, adj)
    rmc = riesz_mc or mc
    cache = {}

    def factory(t):
        if t not in cache:
            cache[t] = riesz_matrix(t, tup, rmc, keep_samples=False)
        return cache[t]

    table = mp_residual(problem, bar, adj, factory, tau_grid, u_grid)
    costs = pathwise_cost(problem, bar)
    return MpVerdict(table, bar, adj, cache, reduce_mean(costs, mc.antithetic))


# -- the x^(2) approximation and the two second-order routes -------------------------------------------

def _quad_form(tup_vals, y):
    """``∫⟨y, N y⟩dt + ⟨y(1), M y(1)⟩`` per path from arrays of N_k and M."""
    n_mats, m_mat, dt = tup_vals
    integ = dt * np.einsum("pki,pkij,pkj->p", y[:, :-1], n_mats, y[:, :-1])
    return integ + np.einsum("pi,pij,pj->p", y[:, -1], m_mat, y[:, -1])


def _second_order_data(problem, bar, adjoint):
    grid = bar.grid
    x = bar.values
    ub = bar.control.values
    p_cnt, n = x.shape[0], problem.dim
    n_mats = np.empty((p_cnt, grid.steps, n, n))
    for k in range(grid.steps):
        n_mats[:, k] = problem.hamiltonian_xx(grid.time(k), x[:, k], ub[:, k], adjoint.p[:, k], adjoint.q[:, k])
    m_mat = np.broadcast_to(problem.h_xx(x[:, -1]), (p_cnt, n, n))
    return n_mats, m_mat, grid.dt


def _linearised(problem, bar, path):
    grid = bar.grid
    x, ub = bar.values, bar.control.values

    def fx(k):
        return problem.f_x(grid.time(k), x[:, k], ub[:, k])

    def gx(k):
        return problem.g_x(grid.time(k), x[:, k], ub[:, k])

    stepper = Stepper(problem.pair, grid, path.values if problem.pair.random else None)
    return stepper, fx, gx


def approx_x2_by_spike_z(problem, ubar: Control, tau: float, u, eps_list, mc: McConfig,
                         grid: TimeGrid | None = None) -> StudyTable:
    """Compare ``x^(2)`` (forcing ``ε^{-1/2}g^Δ(t)``) with ``z^ε`` (forcing ``ε^{-1/2}g^Δ(τ)``).

    Rows ``(eps, sup_t Ê‖x^(2) − z^ε‖⁴, stderr, lhs, rhs, route_gap)`` where
    ``lhs = ε⁻¹[∫⟨x₁,Ñx₁⟩ + ⟨x₁(1),M̃x₁(1)⟩]`` and ``rhs`` is the same
    functional of ``x^(2)``.
    """
    grid = grid or TimeGrid()
    w = sample_ensemble(grid, mc)
    bar = _reference(problem, ubar, w)
    adj = solve_adjoint_regression(problem, bar)
    data = _second_order_data(problem, bar, adj)
    stepper, fx, gx = _linearised(problem, bar, w)
    x, ub = bar.values, bar.control.values
    zero = np.zeros((w.paths, problem.dim))
    rows = []
    k0 = grid.index(tau)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    g_tau = problem.g(grid.time(k0), x[:, k0], np.broadcast_to(u, ub[:, k0].shape)) \
        - problem.g(grid.time(k0), x[:, k0], ub[:, k0])
    for eps in eps_list:
        sl = grid.spike_slice(tau, eps)
        scale = 1.0 / np.sqrt(eps)

        def delta(fn):
            def term(k, y):
                if not sl.start <= k < sl.stop:
                    return 0.0
                t = grid.time(k)
                return scale * (fn(t, x[:, k], np.broadcast_to(u, ub[:, k].shape)) - fn(t, x[:, k], ub[:, k]))
            return term

        xa = integrate(stepper, w.increments, zero, k0=sl.start, fx=fx, gx=gx, drift=delta(problem.f))
        xb = integrate(stepper, w.increments, zero, k0=sl.start, fx=fx, gx=gx, diffusion=delta(problem.g))
        ze = integrate(stepper, w.increments, zero, k0=sl.start, fx=fx, gx=gx,
                       diffusion=lambda k, y: scale * g_tau if sl.start <= k < sl.stop else 0.0)
        d4 = np.sum((xb - ze) ** 2, axis=-1) ** 2
        m, s = reduce_mean(d4)
        kk = int(np.argmax(m))
        lhs, _ = reduce_mean(_quad_form(data, xa + xb))
        rhs, _ = reduce_mean(_quad_form(data, xb))
        rows.append((float(eps), float(m[kk]), float(s[kk]), lhs, rhs, abs(lhs - rhs)))
    fourth = [r[1] for r in rows]
    ok = all(b < a + 3.0 * np.hypot(rows[i][2], rows[i + 1][2])
             for i, (a, b) in enumerate(zip(fourth, fourth[1:])))
    return StudyTable(("eps", "fourth_moment", "stderr", "lhs", "rhs", "route_gap"), rows, bool(ok))


def variational_inequality(problem, ubar: Control, tau: float, u, eps: float, mc: McConfig,
                           grid: TimeGrid | None = None, riesz: RieszOperator | None = None) -> dict:
    """Right side of the first-plus-second-order variational inequality at one ε.

    Returns the ΔH average over the spike, the x₁-based quadratic term
    ``ε⁻¹[∫⟨x₁,H_xx x₁⟩ + ⟨x₁(1),h_xx x₁(1)⟩]`` (before the factor ½), their
    standard errors, and, when ``riesz`` is given, ``⟨g^Δ(τ), P̂ g^Δ(τ)⟩`` for
    comparing the two second-order routes.
    """
    grid = grid or TimeGrid()
    w = sample_ensemble(grid, mc)
    bar = _reference(problem, ubar, w)
    adj = solve_adjoint_regression(problem, bar)
    ueps = spike_control(bar.control, tau, eps, u, grid, problem.control_set)
    x1 = solve_first_variation(problem, bar, ueps, w)
    data = _second_order_data(problem, bar, adj)
    x, ub = bar.values, bar.control.values
    sl = grid.spike_slice(tau, eps)
    dh = np.zeros(len(x))
    for k in range(sl.start, sl.stop):
        t = grid.time(k)
        dh = dh + grid.dt * (_ham(problem, t, x[:, k], ueps.values[:, k], adj.p[:, k], adj.q[:, k])
                             - _ham(problem, t, x[:, k], ub[:, k], adj.p[:, k], adj.q[:, k]))
    dh = dh / eps
    quad = _quad_form(data, x1.values) / eps
    first, first_se = reduce_mean(dh)
    second, second_se = reduce_mean(quad)
    total, total_se = reduce_mean(dh + 0.5 * quad)
    out = {"eps": eps, "first": first, "first_stderr": first_se, "quadratic": second,
           "quadratic_stderr": second_se, "rhs": total, "rhs_stderr": total_se}
    if riesz is not None:
        k0 = sl.start
        u_arr = np.broadcast_to(np.atleast_1d(u), ub[:, k0].shape)
        gd = problem.g(grid.time(k0), x[:, k0], u_arr) - problem.g(grid.time(k0), x[:, k0], ub[:, k0])
        pq = np.einsum("pi,ij,pj->p", gd, riesz.matrix, gd)
        out["riesz_quadratic"], out["riesz_quadratic_stderr"] = reduce_mean(pq)
    return out
