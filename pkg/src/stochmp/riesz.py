"""The stochastic bilinear functional T_τ and its Riesz matrix P_τ.

For a tuple (Ã, B̃, M, N) and a start time τ,

    T_τ(ξ, ζ) = E⟨z^ξ(1), M z^ζ(1)⟩ + E∫_τ¹⟨z^ξ, N z^ζ⟩dt,

where ``z^ξ`` solves the homogeneous linear equation from ``z(τ) = ξ``.
All flows for a set of start vectors are integrated together on each
path, so every entry of ``P_τ`` is built from the same random numbers and
``⟨ξ, P̂_τ ζ⟩ = Σ ξ_i ζ_j T̂(e_i, e_j)`` holds exactly. Conditional
expectations given ``F_τ`` become plain expectations because ξ, ζ are
deterministic here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator

from .see import Stepper, integrate
from .stochastics import (
    ConfigurationError,
    McConfig,
    NonFiniteError,
    TimeGrid,
    WienerPath,
    _blocks,
    _sample_block,
    reduce_mean,
)

MAX_SHARE = 0.1


class NotAppropriateError(ConfigurationError):
    """The integrability witness Λ₁ is not finite on the sampled paths."""

    code = "E_NOT_APPROPRIATE"


@dataclass(frozen=True)
class BlockContext:
    """What a path-dependent coefficient sees: the block's Wiener values and its path rows."""

    w: np.ndarray
    rows: slice


@dataclass(frozen=True, eq=False)
class AdjointTuple:
    """The four-tuple (Ã, B̃, M, N) on a time grid.

    ``pair`` holds A and B. ``fx``/``gx`` add explicit linearisation terms
    (``Ã = A + fx``, ``B̃ = B + gx``). ``m`` and ``n_at`` are constant
    matrices or callables ``(ctx)`` / ``(k, ctx)`` returning one matrix per
    path. A tuple whose coefficients come from a reference ensemble is
    ``tied`` to it: evaluations then run on exactly those Wiener paths.
    """

    pair: object
    m: np.ndarray | Callable
    grid: TimeGrid
    n_at: np.ndarray | Callable | None = None
    fx: np.ndarray | Callable | None = None
    gx: np.ndarray | Callable | None = None
    tied: WienerPath | None = None

    @property
    def dim(self) -> int:
        return self.pair.dim

    @property
    def deterministic(self) -> bool:
        return not any(callable(c) for c in (self.m, self.n_at, self.fx, self.gx)) and not self.pair.random

    def m_value(self, ctx: BlockContext) -> np.ndarray:
        return np.asarray(self.m(ctx) if callable(self.m) else self.m, dtype=float)

    def n_value(self, k: int, ctx: BlockContext):
        if self.n_at is None:
            return None
        return np.asarray(self.n_at(k, ctx) if callable(self.n_at) else self.n_at, dtype=float)

    def _lin(self, c, ctx):
        if c is None:
            return None
        if callable(c):
            return lambda k: np.asarray(c(k, ctx), dtype=float)
        arr = np.asarray(c, dtype=float)
        return lambda k: arr

    def lambda1(self, ctx: BlockContext) -> np.ndarray:
        """Per-path ``Λ₁ = ‖M‖² + ∫‖N(t)‖²dt`` (spectral norms, left-point rule)."""
        p = ctx.w.shape[0]
        lam = np.broadcast_to(_spec_norm(self.m_value(ctx)) ** 2, (p,)).astype(float)
        if self.n_at is not None:
            acc = np.zeros(p)
            for k in range(self.grid.steps):
                acc = acc + self.grid.dt * _spec_norm(self.n_value(k, ctx)) ** 2
            lam = lam + acc
        return lam


def _spec_norm(m: np.ndarray) -> np.ndarray:
    if m.ndim == 2:
        return np.float64(np.linalg.norm(m, ord=2))
    return np.linalg.norm(m, ord=2, axis=(-2, -1))


# -- core evaluation ---------------------------------------------------------------

def _block_iter(tup: AdjointTuple, mc: McConfig):
    """Yield ``(increments, ctx)`` per block: fresh samples or slices of the tied ensemble."""
    grid = tup.grid
    if tup.tied is not None:
        inc = tup.tied.increments if tup.tied.increments.ndim == 2 else tup.tied.increments[None]
        w_all = tup.tied.values if inc is tup.tied.increments else tup.tied.values[None]
        for s, e in _blocks(len(inc), mc.block):
            yield inc[s:e], BlockContext(w_all[s:e], slice(s, e))
    else:
        for s, e in _blocks(mc.paths, mc.block):
            inc = _sample_block(grid, mc.seed, s, e, mc.antithetic)
            w = np.pad(np.cumsum(inc, axis=1), [(0, 0), (1, 0)])
            yield inc, BlockContext(w, slice(s, e))


def _pairwise_block(tup, tau_index, vectors, inc, ctx, eps_steps=None, eps=None):
    """Per-path matrix ``T[p, i, j]`` for the start vectors ``vectors`` (shape ``(nb, n)``)."""
    grid = tup.grid
    p = inc.shape[0]
    nb = vectors.shape[0]
    stepper = Stepper(tup.pair, grid, ctx.w if tup.pair.random else None)
    acc = np.zeros((p, nb, nb))
    dt = grid.dt

    def observe(k, y):
        if k >= grid.steps or tup.n_at is None:
            return
        nk = tup.n_value(k, ctx)
        ny = y @ nk.T if nk.ndim == 2 else np.einsum("pij,pbj->pbi", nk, y)
        acc[...] += dt * np.einsum("pai,pbi->pab", y, ny)

    if eps_steps is None:
        y0 = np.broadcast_to(vectors, (p, nb, vectors.shape[1]))
        diffusion = None
    else:
        y0 = np.zeros((p, nb, vectors.shape[1]))
        kick = vectors / np.sqrt(eps)
        stop = tau_index + eps_steps

        def diffusion(k, y):
            return kick if k < stop else 0.0

    z1 = integrate(stepper, inc, y0, k0=tau_index, diffusion=diffusion,
                   fx=tup._lin(tup.fx, ctx), gx=tup._lin(tup.gx, ctx), store=False, observe=observe)
    m = tup.m_value(ctx)
    mz = z1 @ m.T if m.ndim == 2 else np.einsum("pij,pbj->pbi", m, z1)
    return acc + np.einsum("pai,pbi->pab", z1, mz)


def _pairwise(tup, tau, vectors, mc, eps=None) -> np.ndarray:
    grid = tup.grid
    k0 = grid.index(tau, snap=True)
    eps_steps = None
    if eps is not None:
        if eps < grid.dt:
            raise ConfigurationError(f"eps = {eps} is below the grid step {grid.dt}")
        eps_steps = grid.spike_slice(grid.time(k0), eps).stop - k0
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    parts = []
    for inc, ctx in _block_iter(tup, mc):
        lam = tup.lambda1(ctx)
        bad = ~np.isfinite(lam)
        if bad.any():
            idx = ctx.rows.start + int(np.argmax(bad))
            raise NotAppropriateError(f"Λ₁ is not finite on path {idx}")
        parts.append(_pairwise_block(tup, k0, vectors, inc, ctx, eps_steps, eps))
    return np.concatenate(parts, axis=0)


def _reduce(samples: np.ndarray, mc: McConfig, tup: AdjointTuple):
    return reduce_mean(samples, mc.antithetic and tup.tied is None)


def eval_T(tau: float, xi, zeta, tup: AdjointTuple, mc: McConfig) -> tuple[float, float]:
    """Monte Carlo ``T̂_τ(ξ, ζ)`` and its standard error."""
    samples = _pairwise(tup, tau, np.stack([np.asarray(xi, float), np.asarray(zeta, float)]), mc)
    return _reduce(samples[:, 0, 1], mc, tup)


def eval_T_eps(tau: float, eps: float, xi, zeta, tup: AdjointTuple, mc: McConfig) -> tuple[float, float]:
    """Monte Carlo ``T̂^ε_τ(ξ, ζ)`` from the spike-driven flows ``z_ε``."""
    samples = _pairwise(tup, tau, np.stack([np.asarray(xi, float), np.asarray(zeta, float)]), mc, eps)
    return _reduce(samples[:, 0, 1], mc, tup)


# -- Riesz matrix ---------------------------------------------------------------------

@dataclass(eq=False)
class RieszOperator:
    """Estimated ``P_τ`` with entry-wise standard errors and Ê[Λ₁]."""

    tau: float
    matrix: np.ndarray
    stderr: np.ndarray
    lambda_estimate: float
    asymmetry: float = 0.0
    symmetrized: bool = False
    seed: int | None = None
    samples: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def bilinear(self, xi, zeta) -> float:
        return float(np.asarray(xi, float) @ self.matrix @ np.asarray(zeta, float))

    def quadratic_samples(self, v) -> np.ndarray:
        """Per-path ``⟨v, T̂ v⟩`` (for standard errors of quadratic forms)."""
        v = np.asarray(v, dtype=float)
        return np.einsum("i,pij,j->p", v, self.samples, v)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "matrix": self.matrix.tolist(), "stderr": self.stderr.tolist(),
                "lambda": self.lambda_estimate, "asymmetry": self.asymmetry, "seed": self.seed}


def _is_symmetric(tup: AdjointTuple, ctx: BlockContext) -> bool:
    m = tup.m_value(ctx)
    if not np.allclose(m, np.swapaxes(m, -1, -2), atol=1e-14):
        return False
    if tup.n_at is None:
        return True
    for k in (0, tup.grid.steps // 2, tup.grid.steps - 1):
        nk = tup.n_value(k, ctx)
        if not np.allclose(nk, np.swapaxes(nk, -1, -2), atol=1e-14):
            return False
    return True


def riesz_matrix(tau: float, tup: AdjointTuple, mc: McConfig, keep_samples: bool = True) -> RieszOperator:
    """``P̂_τ[i, j] = T̂_τ(e_i, e_j)`` from one flow per basis vector and path."""
    n = tup.dim
    samples = _pairwise(tup, tau, np.eye(n), mc)
    mean, se = _reduce(samples, mc, tup)
    mean = np.atleast_2d(mean)
    se = np.atleast_2d(se)
    lam = _lambda_mean(tup, mc)
    first = next(_block_iter(tup, mc.with_paths(2) if tup.tied is None else mc))[1]
    asym = float(np.linalg.norm(mean - mean.T))
    sym = _is_symmetric(tup, first)
    if sym:
        mean = 0.5 * (mean + mean.T)
        samples = 0.5 * (samples + np.swapaxes(samples, 1, 2))
    return RieszOperator(tup.grid.time(tup.grid.index(tau, snap=True)), mean, se, lam, asym, sym,
                         mc.seed, samples if keep_samples else None)


def _lambda_samples(tup: AdjointTuple, mc: McConfig) -> np.ndarray:
    return np.concatenate([tup.lambda1(ctx) for _, ctx in _block_iter(tup, mc)])


def _lambda_mean(tup: AdjointTuple, mc: McConfig) -> float:
    if tup.deterministic:
        ctx = BlockContext(np.zeros((1, tup.grid.steps + 1)), slice(0, 1))
        return float(tup.lambda1(ctx)[0])
    return float(np.mean(_lambda_samples(tup, mc)))


class RieszEstimator(BaseEstimator):
    """Estimator wrapper: ``fit(tuple)`` stores ``matrix_``, ``stderr_`` and ``operator_``."""

    def __init__(self, tau: float = 0.25, paths: int = 100_000, seed: int = 0,
                 antithetic: bool = False, block: int = 8192):
        self.tau = tau
        self.paths = paths
        self.seed = seed
        self.antithetic = antithetic
        self.block = block

    def fit(self, tup: AdjointTuple, y=None):
        mc = McConfig(self.paths, self.seed, self.antithetic, 1, self.block)
        self.operator_ = riesz_matrix(self.tau, tup, mc)
        self.matrix_ = self.operator_.matrix
        self.stderr_ = self.operator_.stderr
        return self

    def predict(self, xi, zeta=None):
        """``⟨ξ, P̂ζ⟩`` (``ζ = ξ`` when omitted); rows of ξ are evaluated separately."""
        xi = np.atleast_2d(np.asarray(xi, float))
        zeta = xi if zeta is None else np.atleast_2d(np.asarray(zeta, float))
        return np.einsum("bi,ij,bj->b", xi, self.matrix_, zeta)


# -- diagnostics ------------------------------------------------------------------------

@dataclass
class CheckReport:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), **self.details}


def appropriate_check(tup: AdjointTuple, mc: McConfig) -> CheckReport:
    """Finite and stable ``Ê[Λ₁]``.

    Stability means that doubling the path count moves the estimate by
    less than three standard errors and that no single path carries more
    than ``MAX_SHARE`` of the sample sum (a symptom of an infinite mean).
    """
    if tup.deterministic:
        lam = _lambda_mean(tup, mc)
        ok = bool(np.isfinite(lam))
        return CheckReport("appropriate", ok, {"lambda": lam, "lambda_doubled": lam,
                                               "stderr": 0.0, "max_share": 0.0})
    if tup.tied is not None:
        full = _lambda_samples(tup, mc)
        small = full[: len(full) // 2]
    else:
        full = _lambda_samples(tup, mc.with_paths(2 * mc.paths))
        small = full[: mc.paths]
    bad = ~np.isfinite(full)
    if bad.any():
        idx = int(np.argmax(bad))
        raise NonFiniteError(idx, float(full[idx]))
    m1, s1 = reduce_mean(small)
    m2, s2 = reduce_mean(full)
    share = float(np.max(np.abs(full)) / max(np.sum(np.abs(full)), np.finfo(float).tiny))
    stable = abs(m2 - m1) <= 3.0 * max(s1, s2) and share <= MAX_SHARE
    return CheckReport("appropriate", bool(stable and np.isfinite(m2)),
                       {"lambda": m1, "lambda_doubled": m2, "stderr": s1, "max_share": share})


@dataclass
class StudyTable:
    """Rows of a convergence study plus the verdict of its acceptance rule."""

    columns: tuple
    rows: list
    passed: bool
    details: dict = field(default_factory=dict)

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float)


def spike_limit_study(tau: float, xi, zeta, tup: AdjointTuple, eps_list, mc: McConfig) -> StudyTable:
    """Gaps ``|T̂^ε_τ(ξ,ζ) − ⟨ξ, P̂_τζ⟩|`` over decreasing ε, with common random numbers."""
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigurationError("eps list must be strictly decreasing")
    vec = np.stack([np.asarray(xi, float), np.asarray(zeta, float)])
    base = _pairwise(tup, tau, vec, mc)[:, 0, 1]
    target, target_se = _reduce(base, mc, tup)
    rows = []
    for eps in eps_list:
        s = _pairwise(tup, tau, vec, mc, eps)[:, 0, 1]
        val, se = _reduce(s, mc, tup)
        _, gap_se = _reduce(s - base, mc, tup)
        rows.append((eps, val, abs(val - target), gap_se))
    ok_mono = all(rows[i][2] <= rows[i - 1][2] + 3.0 * np.hypot(rows[i][3], rows[i - 1][3])
                  for i in range(1, len(rows)))
    final_ok = rows[-1][2] < max(3.0 * rows[-1][3], 0.02 * abs(target)) if rows else True
    if rows and target == 0.0 and rows[-1][2] == 0.0:
        final_ok = True
    return StudyTable(("eps", "T_eps", "gap", "stderr"), rows, bool(ok_mono and final_ok),
                      {"target": target, "target_stderr": target_se,
                       "monotone": bool(ok_mono), "final": bool(final_ok)})


def continuity_probe(tau: float, xi, zeta, tup: AdjointTuple, mc: McConfig,
                     spacings=(2**-3, 2**-4, 2**-5, 2**-6)) -> StudyTable:
    """``|Ê⟨ξ,(P_{τ+h} − P_τ)ζ⟩|`` for shrinking spacings h, on common random numbers."""
    vec = np.stack([np.asarray(xi, float), np.asarray(zeta, float)])
    base = _pairwise(tup, tau, vec, mc)[:, 0, 1]
    scale, _ = _reduce(base, mc, tup)
    rows = []
    for h in spacings:
        s = _pairwise(tup, tau + h, vec, mc)[:, 0, 1]
        diff, se = _reduce(s - base, mc, tup)
        rows.append((h, abs(diff), se))
    coarse, fine = rows[0], rows[-1]
    ok_shrink = fine[1] <= coarse[1] + 3.0 * np.hypot(fine[2], coarse[2])
    ok_fine = fine[1] < max(3.0 * fine[2], 0.02 * abs(scale)) or fine[1] == 0.0
    return StudyTable(("spacing", "difference", "stderr"), rows, bool(ok_shrink and ok_fine),
                      {"scale": scale})


def norm_bound_check(riesz: RieszOperator, exact_ratio: float | None = None, rtol: float = 0.02) -> CheckReport:
    """Ratio ``‖P̂_τ‖₂ / √(Ê Λ₁)``; with ``exact_ratio`` also compares to the closed form."""
    norm = float(np.linalg.norm(riesz.matrix, ord=2))
    lam = riesz.lambda_estimate
    ratio = 0.0 if norm == 0.0 else norm / np.sqrt(lam) if lam > 0 else np.inf
    ok = bool(np.isfinite(ratio))
    details = {"ratio": ratio, "norm": norm, "lambda": lam}
    if exact_ratio is not None:
        se = float(np.max(riesz.stderr)) / np.sqrt(lam) if lam > 0 else 0.0
        details["exact_ratio"] = exact_ratio
        ok = ok and abs(ratio - exact_ratio) <= max(3.0 * se, rtol * abs(exact_ratio))
    return CheckReport("norm_bound", ok, details)


# -- tuples from a control problem ------------------------------------------------------

def problem_tuple(problem, bar=None, adjoint=None) -> AdjointTuple:
    """Second-order tuple ``(A + f̄_x, B + ḡ_x, h_xx(x̄(1)), H_xx)`` along a reference solution.

    LQ problems give a deterministic tuple. Otherwise the tuple is tied to
    the Wiener paths of ``bar`` and reads ``x̄``, ``ū``, ``p``, ``q`` from it.
    """
    grid = bar.grid if bar is not None else None
    if problem.lq is not None and not problem.pair.random:
        lq = problem.lq
        return AdjointTuple(problem.pair, lq.M, grid or TimeGrid(), n_at=lq.Q,
                            fx=lq.F if np.any(lq.F) else None,
                            gx=lq.G if np.any(lq.G) else None)
    if bar is None or adjoint is None:
        raise ConfigurationError("a non-LQ tuple needs the reference ensemble and its adjoint")
    x = bar.values if bar.is_ensemble else bar.values[None]
    u = np.broadcast_to(bar.control.values, x.shape[:-1] + (bar.control.values.shape[-1],))
    n = problem.dim

    def per_path(val, rows):
        val = np.asarray(val, dtype=float)
        return np.broadcast_to(val, (rows.stop - rows.start, n, n)) if val.ndim == 2 else val

    def fx(k, ctx):
        r = ctx.rows
        return per_path(problem.f_x(grid.time(k), x[r, k], u[r, k]), r)

    def gx(k, ctx):
        r = ctx.rows
        return per_path(problem.g_x(grid.time(k), x[r, k], u[r, k]), r)

    def m(ctx):
        r = ctx.rows
        return per_path(problem.h_xx(x[r, -1]), r)

    def n_at(k, ctx):
        r = ctx.rows
        return problem.hamiltonian_xx(grid.time(k), x[r, k], u[r, k], adjoint.p[r, k], adjoint.q[r, k])

    return AdjointTuple(problem.pair, m, grid, n_at=n_at, fx=fx, gx=gx, tied=bar.wiener)


def scalar_oracle(a0: float, b0: float, m: float, nu: float, tau: float) -> float:
    """Closed-form ``P_τ`` for constant scalar data: ``m e^{θ(1−τ)} + ν(e^{θ(1−τ)} − 1)/θ``."""
    theta = 2.0 * a0 + b0 * b0
    e = np.exp(theta * (1.0 - tau))
    integral = (1.0 - tau) if theta == 0.0 else (e - 1.0) / theta
    return float(m * e + nu * integral)


def scalar_oracle_eps(a0: float, b0: float, m: float, tau: float, eps: float) -> float:
    """Closed-form ``T^ε_τ(1, 1)`` for constant scalar data with ``N = 0``."""
    theta = 2.0 * a0 + b0 * b0
    if theta == 0.0:
        return float(m)
    return float(m * np.exp(theta * (1.0 - tau - eps)) * np.expm1(theta * eps) / (theta * eps))
