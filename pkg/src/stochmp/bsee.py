"""First-order adjoint equation: regression solver, Riccati oracle, duality check.

The regression solver is the exact discrete dual of the forward scheme in
:mod:`stochmp.see`. With ``R_k = (I − dt·A_k)⁻¹`` and ``π_k = R_kᵀ p_{k+1}``,

    q_k = E_k[π_k ΔW_k] / dt,
    p_k = E_k[π_k] + dt·(f_xᵀ E_k[π_k] + (B + g_x)ᵀ q_k + l_x),     p_N = h_x(x̄_N),

so that ``E⟨h_x, y_N⟩ + E Σ dt⟨l_x, y_k⟩`` equals the forcing pairing for
every solution ``y`` of the first-variation scheme. Conditional
expectations ``E_k`` are least-squares regressions on ``{1, x, x∘x}`` of the
standardised state ``x̄_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from sklearn.base import BaseEstimator

from .see import StatePath, Stepper, matvec
from .stochastics import ConfigurationError, reduce_mean

RICCATI_RTOL = 1e-11
RICCATI_ATOL = 1e-12
COND_LIMIT = 1e10
RIDGE_SCALE = 1e-8


class UnsupportedProblemError(ConfigurationError):
    code = "E_UNSUPPORTED"


class EnsembleMismatchError(ValueError):
    code = "E_ENSEMBLE"


# -- containers ------------------------------------------------------------------

@dataclass(eq=False)
class AdjointPair:
    """Adjoint processes on the grid, shape ``(paths, steps+1, n)``.

    ``q`` is defined on ``[0, 1)``; its last entry repeats ``q_{N−1}`` for
    the regression method, which also keeps ``p_hat = E_k[π_k]`` and the
    per-step root-mean-square predictive standard errors ``p_se``, ``q_se``
    of the two regressions.
    """

    p: np.ndarray
    q: np.ndarray
    grid: object
    method: str
    diagnostics: dict = field(default_factory=dict)
    p_hat: np.ndarray | None = field(default=None, repr=False)
    p_se: np.ndarray | None = field(default=None, repr=False)
    q_se: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.method not in ("regression", "riccati-oracle"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.p.shape != self.q.shape:
            raise ValueError("p and q must have the same shape")

    @property
    def paths(self) -> int:
        return self.p.shape[0]

    def sup_mean_square(self, which: str = "p") -> tuple[np.ndarray, np.ndarray]:
        """Per-grid-point ``Ê‖·‖²`` and standard errors."""
        arr = self.p if which == "p" else self.q
        return reduce_mean(np.sum(arr * arr, axis=-1))

    def energy(self) -> float:
        """``sup_t Ê‖p‖² + ∫ Ê‖q‖² dt``."""
        mp, _ = self.sup_mean_square("p")
        mq, _ = self.sup_mean_square("q")
        return float(np.max(mp) + np.sum(mq[:-1]) * self.grid.dt)

    def to_rows(self):
        """Rows ``(t, mean‖p‖, mean‖q‖)``."""
        t = self.grid.times
        return np.column_stack([t, np.linalg.norm(self.p, axis=-1).mean(axis=0),
                                np.linalg.norm(self.q, axis=-1).mean(axis=0)])


@dataclass(eq=False)
class RiccatiSolution:
    """Value function ``V(t,x) = ½xᵀΠx + φᵀx + ψ`` of an LQ problem and its feedback."""

    problem: object
    pi: Callable
    phi: Callable
    psi: Callable
    s_inv: Callable

    def gain(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """``(K, k)`` with optimal ``u = −(Kx + k)``."""
        lq = self.problem.lq
        pi = self.pi(t)
        _, b = self.problem.pair.at(t)
        bh = b + lq.G
        s_inv = self.s_inv(t)
        big_l = lq.C.T @ pi + lq.D.T @ pi @ bh
        return s_inv @ big_l, s_inv @ (lq.C.T @ self.phi(t))

    def control(self, t: float, x) -> np.ndarray:
        """Unconstrained optimal feedback at ``(t, x)``."""
        k_mat, k_vec = self.gain(t)
        return -(np.asarray(x) @ k_mat.T + k_vec)

    def value(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.pi(t), x) + x @ self.phi(t) + self.psi(t)

    @property
    def cost(self) -> float:
        """Optimal cost ``J(ū) = V(0, x₀)``."""
        return float(self.value(0.0, self.problem.x0))


def _require_lq(problem):
    if getattr(problem, "lq", None) is None:
        raise UnsupportedProblemError(f"{problem.name} is not a linear-quadratic problem")
    if problem.pair.random:
        raise UnsupportedProblemError("Riccati oracle needs deterministic operators")


# -- Riccati oracle ----------------------------------------------------------------

def solve_riccati(problem) -> RiccatiSolution:
    """Integrate the Riccati, affine and scalar equations backward from ``t = 1``."""
    _require_lq(problem)
    lq = problem.lq
    n = problem.dim

    def parts(t, pi):
        a, b = problem.pair.at(t)
        ah, bh = a + lq.F, b + lq.G
        s = lq.R + lq.D.T @ pi @ lq.D
        big_l = lq.C.T @ pi + lq.D.T @ pi @ bh
        return ah, bh, s, big_l

    def rhs(t, y):
        pi = y[: n * n].reshape(n, n)
        phi = y[n * n: n * n + n]
        ah, bh, s, big_l = parts(t, pi)
        s_inv_l = np.linalg.solve(s, big_l)
        s_inv_ct = np.linalg.solve(s, lq.C.T)
        dpi = -(pi @ ah + ah.T @ pi + bh.T @ pi @ bh + lq.Q - big_l.T @ s_inv_l)
        dpi = 0.5 * (dpi + dpi.T)
        dphi = -(ah.T - big_l.T @ s_inv_ct) @ phi + lq.Q @ lq.r
        dpsi = -(0.5 * lq.r @ lq.Q @ lq.r - 0.5 * phi @ lq.C @ s_inv_ct @ phi)
        return np.concatenate([dpi.ravel(), dphi, [dpsi]])

    y1 = np.concatenate([lq.M.ravel(), np.zeros(n), [0.0]])
    sol = solve_ivp(rhs, (1.0, 0.0), y1, method="DOP853", rtol=RICCATI_RTOL,
                    atol=RICCATI_ATOL, dense_output=True)
    if not sol.success:
        raise RuntimeError(f"Riccati integration failed: {sol.message}")
    dense = sol.sol

    def pi(t):
        m = dense(t)[: n * n].reshape(n, n)
        return 0.5 * (m + m.T)

    def s_inv(t):
        return np.linalg.inv(lq.R + lq.D.T @ pi(t) @ lq.D)

    return RiccatiSolution(problem, pi, lambda t: dense(t)[n * n: n * n + n],
                           lambda t: float(dense(t)[-1]), s_inv)


def lq_feedback_cost(problem, gain: Callable) -> float:
    """Exact cost of the unconstrained affine feedback ``u = −(K(t)x + k(t))``.

    Integrates the mean and second-moment equations of the closed-loop
    state forward and accumulates the expected running and terminal cost.
    """
    _require_lq(problem)
    lq = problem.lq
    n = problem.dim

    def rhs(t, y):
        mu = y[:n]
        sig = y[n: n + n * n].reshape(n, n)
        a, b = problem.pair.at(t)
        k_mat, k_vec = gain(t)
        fc = a + lq.F - lq.C @ k_mat
        c = -lq.C @ k_vec
        gc = b + lq.G - lq.D @ k_mat
        d = -lq.D @ k_vec
        dmu = fc @ mu + c
        gm = np.outer(gc @ mu, d)
        dsig = (fc @ sig + sig @ fc.T + np.outer(c, mu) + np.outer(mu, c)
                + gc @ sig @ gc.T + gm + gm.T + np.outer(d, d))
        krk = k_mat.T @ lq.R @ k_mat
        run = (0.5 * np.trace(lq.Q @ sig) - lq.r @ lq.Q @ mu + 0.5 * lq.r @ lq.Q @ lq.r
               + 0.5 * np.trace(krk @ sig) + k_vec @ lq.R @ k_mat @ mu + 0.5 * k_vec @ lq.R @ k_vec)
        return np.concatenate([dmu, dsig.ravel(), [run]])

    x0 = problem.x0
    y0 = np.concatenate([x0, np.outer(x0, x0).ravel(), [0.0]])
    sol = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", rtol=RICCATI_RTOL, atol=RICCATI_ATOL)
    yend = sol.y[:, -1]
    sig = yend[n: n + n * n].reshape(n, n)
    return float(yend[-1] + 0.5 * np.trace(lq.M @ sig))


def solve_adjoint_riccati(problem, bar: StatePath, riccati: RiccatiSolution | None = None) -> AdjointPair:
    """``p = Πx̄ + φ`` and ``q = Π((B + G)x̄ + Dū)`` along the given optimal paths."""
    _require_lq(problem)
    sol = riccati or solve_riccati(problem)
    lq = problem.lq
    grid = bar.grid
    x = bar.values if bar.is_ensemble else bar.values[None]
    u = bar.control.values if bar.control is not None else np.zeros(x.shape[:-1] + (lq.C.shape[1],))
    u = np.broadcast_to(u, x.shape[:-1] + (u.shape[-1],))
    p = np.empty_like(x)
    q = np.empty_like(x)
    for k in range(grid.steps + 1):
        t = grid.time(k)
        pi = sol.pi(t)
        _, b = problem.pair.at(t)
        p[:, k] = x[:, k] @ pi.T + sol.phi(t)
        q[:, k] = (x[:, k] @ (b + lq.G).T + u[:, k] @ lq.D.T) @ pi.T
    return AdjointPair(p, q, grid, "riccati-oracle")


# -- regression solver -------------------------------------------------------------

def _basis(x: np.ndarray, degree: int):
    """Standardised polynomial basis ``{1, x, x∘x}``; drops zero-variance columns."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    keep = std > 1e-12 * (1.0 + np.abs(mean))
    z = (x[:, keep] - mean[keep]) / std[keep]
    cols = [np.ones((len(x), 1))]
    if degree >= 1:
        cols.append(z)
    if degree >= 2:
        cols.append(z * z)
    return np.concatenate(cols, axis=1), (mean, std, keep)


def _apply_basis(x, meta, degree):
    mean, std, keep = meta
    z = (x[:, keep] - mean[keep]) / std[keep]
    cols = [np.ones((len(x), 1))]
    if degree >= 1:
        cols.append(z)
    if degree >= 2:
        cols.append(z * z)
    return np.concatenate(cols, axis=1)


def _predictive_se(design, gram_inv, resid, cols, scale=1.0) -> np.ndarray:
    """RMS over paths of the standard error of ``scale · design[:, cols] @ beta[cols]``.

    Uses the heteroscedasticity-robust (sandwich) coefficient covariance
    ``G⁻¹ Φᵀ diag(r²) Φ G⁻¹`` per output component, summed over components.
    """
    n_paths, d = design.shape
    if n_paths <= d:
        return 0.0
    sub = design[:, cols]
    second = sub.T @ sub / n_paths
    total = 0.0
    for c in range(resid.shape[1]):
        weighted = design * resid[:, c:c + 1]
        cov = gram_inv @ (weighted.T @ weighted) @ gram_inv
        total += float(np.sum(cov[np.ix_(cols, cols)] * second))
    return float(abs(scale) * np.sqrt(max(total, 0.0) * n_paths / (n_paths - d)))


def _normal_solve(gram, rhs):
    """Solve the normal equations, switching to ridge when ill-conditioned."""
    eig = np.linalg.eigvalsh(gram)
    cond = float(eig[-1] / eig[0]) if eig[0] > 0 else np.inf
    ridge = 0.0
    if cond > COND_LIMIT:
        ridge = RIDGE_SCALE * float(np.trace(gram)) / gram.shape[0]
        gram = gram + ridge * np.eye(gram.shape[0])
    return np.linalg.solve(gram, rhs), cond, ridge


class AdjointRegressor(BaseEstimator):
    """Least-squares Monte Carlo solver for ``(p, q)``.

    ``fit(bar, problem)`` runs the backward sweep on the ensemble ``bar``
    (which must carry its Wiener increments and realized control). At each
    step ``π_k = R_kᵀ p_{k+1}`` is regressed jointly on ``φ(x_k)`` and
    ``φ(x_k)ΔW_k/√dt``: the first block gives ``E_k[π_k]``, the second
    ``q_k = E_k[π_k ΔW_k]/dt``. ``predict(k, x)`` evaluates both fits at new
    states. ``stderr=False`` skips the robust standard errors.
    """

    def __init__(self, degree: int = 2, stderr: bool = True):
        self.degree = degree
        self.stderr = stderr

    def fit(self, bar: StatePath, problem):
        if self.degree not in (0, 1, 2):
            raise ValueError("degree must be 0, 1 or 2")
        if bar.wiener is None or bar.control is None:
            raise EnsembleMismatchError("reference ensemble must carry its Wiener path and control")
        grid = bar.grid
        dt = grid.dt
        sqdt = np.sqrt(dt)
        x = bar.values if bar.is_ensemble else bar.values[None]
        dw = bar.wiener.increments if bar.is_ensemble else bar.wiener.increments[None]
        if dw.shape[0] != x.shape[0]:
            raise EnsembleMismatchError("ensemble and Wiener increments differ in path count")
        u = np.broadcast_to(bar.control.values, x.shape[:-1] + (bar.control.values.shape[-1],))
        w = bar.wiener.values if problem.pair.random else None
        if w is not None and w.ndim == 1:
            w = w[None]
        stepper = Stepper(problem.pair, grid, w)
        n_steps = grid.steps
        p = np.empty_like(x)
        q = np.empty_like(x)
        p[:, n_steps] = problem.h_x(x[:, n_steps])
        p_hat = np.zeros_like(x)
        self.coef_ = [None] * n_steps
        conds = np.empty(n_steps)
        ridges = np.zeros(n_steps)
        p_se = np.zeros(n_steps + 1)
        q_se = np.zeros(n_steps + 1)
        for k in range(n_steps - 1, -1, -1):
            t = grid.time(k)
            r, b = stepper.ops(k)
            pi = matvec(np.swapaxes(r, -1, -2), p[:, k + 1])
            xb = x[:, k]
            basis, meta = _basis(xb, self.degree)
            d = basis.shape[1]
            design = np.concatenate([basis, basis * (dw[:, k:k + 1] / sqdt)], axis=1)
            gram = design.T @ design
            beta, conds[k], ridges[k] = _normal_solve(gram, design.T @ pi)
            beta_p, beta_q = beta[:d], beta[d:] / sqdt
            pi_hat = basis @ beta_p
            qk = basis @ beta_q
            if self.stderr:
                g_inv = np.linalg.inv(gram + ridges[k] * np.eye(2 * d))
                resid = pi - design @ beta
                p_se[k] = _predictive_se(design, g_inv, resid, np.arange(d))
                q_se[k] = _predictive_se(design, g_inv, resid, np.arange(d, 2 * d), 1.0 / sqdt)
            fx = np.asarray(problem.f_x(t, xb, u[:, k]), dtype=float)
            gx = np.asarray(problem.g_x(t, xb, u[:, k]), dtype=float)
            bt = b + gx
            p[:, k] = pi_hat + dt * (matvec(np.swapaxes(fx, -1, -2), pi_hat)
                                     + matvec(np.swapaxes(bt, -1, -2), qk)
                                     + problem.l_x(t, xb, u[:, k]))
            q[:, k] = qk
            p_hat[:, k] = pi_hat
            self.coef_[k] = (meta, beta_p, beta_q)
        q[:, n_steps] = q[:, n_steps - 1]
        q_se[n_steps] = q_se[n_steps - 1]
        self.adjoint_ = AdjointPair(
            p, q, grid, "regression",
            diagnostics={"max_condition": float(np.max(conds)),
                         "ridge_steps": int(np.count_nonzero(ridges))},
            p_hat=p_hat, p_se=p_se, q_se=q_se,
        )
        self.condition_numbers_ = conds
        return self

    def predict(self, k: int, x) -> tuple[np.ndarray, np.ndarray]:
        """Fitted ``(E_k[π_k], q_k)`` at states ``x`` of shape ``(m, n)``."""
        meta, beta_p, beta_q = self.coef_[k]
        basis = _apply_basis(np.atleast_2d(x), meta, self.degree)
        return basis @ beta_p, basis @ beta_q


def solve_adjoint_regression(problem, bar: StatePath, degree: int = 2, stderr: bool = True) -> AdjointPair:
    return AdjointRegressor(degree, stderr).fit(bar, problem).adjoint_


def compare_adjoints(est: AdjointPair, ref: AdjointPair, rtol: float = 0.02) -> dict:
    """Sup over t of the mean-square difference, relative to the reference.

    Agreement holds at every grid time when ``√(Ê‖est − ref‖²)`` is within
    ``max(3·se, rtol·ref_norm)``, where ``se`` is the estimator's predictive
    standard error at that time and ``ref_norm = √(sup_t Ê‖ref‖²)``. The
    terminal values must agree exactly.
    """
    out = {}
    ok = True
    n_q = est.q.shape[1] - 1
    for name, e, r, se in (("p", est.p, ref.p, est.p_se), ("q", est.q[:, :n_q], ref.q[:, :n_q],
                                                          None if est.q_se is None else est.q_se[:n_q])):
        m, s = reduce_mean(np.sum((e - r) ** 2, axis=-1))
        scale = float(np.max(np.mean(np.sum(r * r, axis=-1), axis=0)))
        k = int(np.argmax(m))
        se = np.zeros(len(m)) if se is None else np.asarray(se)
        allowed = np.maximum(3.0 * se, rtol * np.sqrt(scale))
        ratio = np.sqrt(m) / np.where(allowed > 0, allowed, np.inf)
        worst = int(np.argmax(ratio))
        out.update({f"{name}_sup_ms": float(m[k]), f"{name}_stderr": float(s[k]),
                    f"{name}_scale": scale, f"{name}_rel": float(np.sqrt(m[k] / scale)) if scale else 0.0,
                    f"{name}_worst_ratio": float(ratio[worst]), f"{name}_worst_time": float(est.grid.time(worst))})
        ok = ok and bool(np.all(np.sqrt(m) <= allowed))
    out["terminal_max"] = float(np.max(np.abs(est.p[:, -1] - ref.p[:, -1])))
    out["passed"] = bool(ok and out["terminal_max"] == 0.0)
    return out


# -- duality -------------------------------------------------------------------------

@dataclass
class DualityReport:
    lhs: float
    rhs: float
    gap: float
    stderr: float

    @property
    def passed(self) -> bool:
        return abs(self.gap) <= 3.0 * self.stderr + 1e-12 * (1.0 + abs(self.lhs))


def check_duality(adjoint: AdjointPair, x1: StatePath, problem, bar: StatePath, ueps) -> DualityReport:
    """Both sides of ``E∫⟨l_x, x₁⟩dt + E⟨h_x(x̄(1)), x₁(1)⟩ = E∫⟨p, f^Δ⟩ + ⟨q, g^Δ⟩dt``."""
    x = bar.values if bar.is_ensemble else bar.values[None]
    y = x1.values if x1.is_ensemble else x1.values[None]
    if y.shape != x.shape or adjoint.p.shape != x.shape:
        raise EnsembleMismatchError("adjoint, x1 and reference ensembles differ in shape")
    grid = bar.grid
    dt = grid.dt
    ub = np.broadcast_to(bar.control.values, x.shape[:-1] + (bar.control.values.shape[-1],))
    ue = np.broadcast_to(ueps.values, ub.shape)
    lhs = np.einsum("pi,pi->p", problem.h_x(x[:, -1]), y[:, -1])
    rhs = np.zeros(len(x))
    sl = ueps.spike.slice(grid) if ueps.spike is not None else slice(0, grid.steps)
    pf = adjoint.p if adjoint.p_hat is None else adjoint.p_hat
    for k in range(grid.steps):
        t = grid.time(k)
        lhs = lhs + dt * np.einsum("pi,pi->p", problem.l_x(t, x[:, k], ub[:, k]), y[:, k])
        if sl.start <= k < sl.stop:
            fd = problem.f(t, x[:, k], ue[:, k]) - problem.f(t, x[:, k], ub[:, k])
            gd = problem.g(t, x[:, k], ue[:, k]) - problem.g(t, x[:, k], ub[:, k])
            rhs = rhs + dt * (np.einsum("pi,pi->p", pf[:, k], fd)
                              + np.einsum("pi,pi->p", adjoint.q[:, k], gd))
    ml, _ = reduce_mean(lhs)
    mr, _ = reduce_mean(rhs)
    gap, se = reduce_mean(lhs - rhs)
    return DualityReport(ml, mr, gap, se)
