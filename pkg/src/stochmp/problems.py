"""Catalog of control problems with known structure.

Coefficient callbacks are vectorised over a leading path axis:

* ``f(t, x, u)``, ``g(t, x, u)`` -> ``(P, n)``
* ``f_x``, ``g_x`` -> ``(P, n, n)`` or a shared ``(n, n)``
* ``f_xx(t, x, u, v, w)``, ``g_xx`` -> ``(P, n)``, the Hessian applied as a
  bilinear form to ``(v, w)``; ``None`` means identically zero
* ``l(t, x, u)`` -> ``(P,)``, ``l_x`` -> ``(P, n)``, ``l_xx`` -> ``(P, n, n)`` or ``(n, n)``
* ``h(x)`` -> ``(P,)``, ``h_x`` -> ``(P, n)``, ``h_xx`` -> ``(P, n, n)`` or ``(n, n)``

Every factory validates derivatives by central finite differences and
samples the growth bounds before returning.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .controls import Control, ControlSet
from .gelfand import GelfandTriple
from .operators import (
    EvolutionOperatorPair,
    ValidationReport,
    check_coercivity,
    check_quasi_skew,
    laplacian1d,
    transport1d,
)
from .stochastics import ConfigurationError

FD_STEP = 1e-5
FD_RTOL = 1e-4


class UnknownProblemError(ConfigurationError):
    code = "E_UNKNOWN_PROBLEM"


class CatalogValidationError(ConfigurationError):
    code = "E_CATALOG"


@dataclass(frozen=True, eq=False)
class LQData:
    """``f = Fx + Cu``, ``g = Gx + Du``, ``l = ½(x−r)ᵀQ(x−r) + ½uᵀRu``, ``h = ½xᵀMx``."""

    F: np.ndarray
    C: np.ndarray
    G: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    M: np.ndarray
    r: np.ndarray


def _zero_bilinear(t, x, u, v, w):
    return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(v), np.shape(w)))


@dataclass(frozen=True, eq=False)
class ControlProblem:
    name: str
    triple: GelfandTriple
    pair: EvolutionOperatorPair
    control_set: ControlSet
    x0: np.ndarray
    f: Callable
    f_x: Callable
    g: Callable
    g_x: Callable
    l: Callable
    l_x: Callable
    l_xx: Callable
    h: Callable
    h_x: Callable
    h_xx: Callable
    f_xx: Callable | None = None
    g_xx: Callable | None = None
    lq: LQData | None = None
    growth_k: float = 10.0
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.triple.dim

    @property
    def control_dim(self) -> int:
        return self.control_set.dim

    def hamiltonian_xx(self, t, x, u, p, q) -> np.ndarray:
        """``H_xx = l_xx + Σᵢ pᵢ fⁱ_xx + Σᵢ qᵢ gⁱ_xx``, shape ``(P, n, n)``."""
        x = np.atleast_2d(x)
        out = np.broadcast_to(np.asarray(self.l_xx(t, x, u), dtype=float),
                              (x.shape[0], self.dim, self.dim)).copy()
        if self.f_xx is None and self.g_xx is None:
            return out
        e = np.eye(self.dim)
        v = e[:, None, :]
        w = e[None, :, :]
        xb = x[:, None, None, :]
        ub = np.asarray(u)[:, None, None, :] if np.ndim(u) == 2 else u
        for hess, mult in ((self.f_xx, p), (self.g_xx, q)):
            if hess is None:
                continue
            vals = hess(t, xb, ub, v, w)
            out += np.einsum("pjki,pi->pjk", vals, np.atleast_2d(mult))
        return out

    def validate(self, samples: int = 64, seed: int = 0) -> list[ValidationReport]:
        """Structural checks required before a problem enters acceptance runs."""
        reports = [
            check_coercivity(self.pair, self.triple, times=np.linspace(0, 1, 5)),
            check_quasi_skew(self._b_sample(), self.pair.big_k),
            derivative_check(self, samples, seed),
            growth_check(self, samples, seed),
        ]
        return reports

    def _b_sample(self) -> np.ndarray:
        b = self.pair.at(0.0, np.zeros(1) if self.pair.random else None)[1]
        return b[0] if b.ndim == 3 else b

    def optimal_control(self, steps: int | None = None) -> Control:
        """Riccati feedback for LQ problems (projected onto U when evaluated)."""
        if self.lq is None:
            raise ConfigurationError(f"{self.name} has no LQ oracle")
        from .bsee import solve_riccati

        sol = solve_riccati(self)
        return Control(feedback=sol.control)


# -- validation ------------------------------------------------------------------

def _sample_points(problem: ControlProblem, samples: int, seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((samples, problem.dim))
    grid = problem.control_set.grid()
    u = grid[rng.integers(0, len(grid), samples)]
    t = float(rng.uniform())
    v = rng.standard_normal((samples, problem.dim))
    w = rng.standard_normal((samples, problem.dim))
    return t, x, u, v, w


def _rel(err, ref) -> float:
    return float(np.max(np.linalg.norm(err.reshape(len(err), -1), axis=1)
                        / np.maximum(1.0, np.linalg.norm(ref.reshape(len(ref), -1), axis=1))))


def _jac_apply(jac, v):
    jac = np.asarray(jac, dtype=float)
    return np.einsum("...ij,...j->...i", jac, v)


def derivative_check(problem: ControlProblem, samples: int = 64, seed: int = 0) -> ValidationReport:
    """Central differences (step 1e-5) against every derivative callback."""
    t, x, u, v, w = _sample_points(problem, samples, seed)
    hstep = FD_STEP
    errs = {}
    for name, fn, jac, hess in (("f", problem.f, problem.f_x, problem.f_xx),
                                ("g", problem.g, problem.g_x, problem.g_xx)):
        fd = (fn(t, x + hstep * v, u) - fn(t, x - hstep * v, u)) / (2 * hstep)
        an = _jac_apply(np.broadcast_to(jac(t, x, u), (samples, problem.dim, problem.dim)), v)
        errs[f"{name}_x"] = _rel(fd - an, an)
        fd2 = (_jac_apply(jac(t, x + hstep * w, u), v) - _jac_apply(jac(t, x - hstep * w, u), v)) / (2 * hstep)
        fd2 = np.broadcast_to(fd2, (samples, problem.dim))
        an2 = (hess or _zero_bilinear)(t, x, u, v, w)
        errs[f"{name}_xx"] = _rel(fd2 - an2, an2)
    fd = (problem.l(t, x + hstep * v, u) - problem.l(t, x - hstep * v, u)) / (2 * hstep)
    an = np.einsum("pi,pi->p", problem.l_x(t, x, u), v)
    errs["l_x"] = _rel((fd - an)[:, None], an[:, None])
    fd = (problem.l_x(t, x + hstep * v, u) - problem.l_x(t, x - hstep * v, u)) / (2 * hstep)
    an = _jac_apply(np.broadcast_to(problem.l_xx(t, x, u), (samples, problem.dim, problem.dim)), v)
    errs["l_xx"] = _rel(fd - an, an)
    fd = (problem.h(x + hstep * v) - problem.h(x - hstep * v)) / (2 * hstep)
    an = np.einsum("pi,pi->p", problem.h_x(x), v)
    errs["h_x"] = _rel((fd - an)[:, None], an[:, None])
    fd = (problem.h_x(x + hstep * v) - problem.h_x(x - hstep * v)) / (2 * hstep)
    an = _jac_apply(np.broadcast_to(problem.h_xx(x), (samples, problem.dim, problem.dim)), v)
    errs["h_xx"] = _rel(fd - an, an)
    worst = max(errs.values())
    return ValidationReport("derivatives", passed=worst < FD_RTOL, margin=FD_RTOL - worst,
                            details={"relative_errors": errs})


def growth_check(problem: ControlProblem, samples: int = 64, seed: int = 0) -> ValidationReport:
    """Sampled constants of the growth bounds on f, g and their derivatives, against ``growth_k``."""
    t, x, u, v, w = _sample_points(problem, samples, seed)
    x = 3.0 * x
    unorm = problem.control_set.norm(u)
    lin = 1.0 + np.linalg.norm(x, axis=1) + unorm
    consts = {}
    for name, fn, jac, hess in (("f", problem.f, problem.f_x, problem.f_xx),
                                ("g", problem.g, problem.g_x, problem.g_xx)):
        consts[name] = float(np.max(np.linalg.norm(fn(t, x, u), axis=1) / lin))
        jm = np.broadcast_to(jac(t, x, u), (samples, problem.dim, problem.dim))
        consts[f"{name}_x"] = float(np.max(np.linalg.norm(jm, ord=2, axis=(1, 2))))
        if hess is not None:
            vn = v / np.linalg.norm(v, axis=1, keepdims=True)
            wn = w / np.linalg.norm(w, axis=1, keepdims=True)
            consts[f"{name}_xx"] = float(np.max(np.linalg.norm(hess(t, x, u, vn, wn), axis=1)))
    worst = max(consts.values())
    return ValidationReport("growth", passed=worst <= problem.growth_k,
                            margin=problem.growth_k - worst,
                            details={"constants": consts, "K": problem.growth_k})


def _admit(problem: ControlProblem) -> ControlProblem:
    failed = [r for r in problem.validate() if not r.passed]
    if failed:
        worst = failed[0]
        raise CatalogValidationError(
            f"{problem.name}: {worst.name} check failed (margin {worst.margin:.3g}, "
            f"exact {worst.exact_margin})")
    return problem


# -- LQ family ------------------------------------------------------------------

def _mat(v, shape, name):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        a = a * np.eye(shape[0]) if shape[0] == shape[1] else np.full(shape, float(a))
    a = a.reshape(shape)
    if not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{name} has non-finite entries")
    return a


def lq(
    a, b, *, F=0.0, C=1.0, G=0.0, D=0.0, Q=1.0, R=1.0, M=1.0, r=0.0,
    x0=1.0, u_max=3.0, kappa: float = 0.5, big_k: float | None = None,
    triple: GelfandTriple | None = None, resolution: int = 21, name: str = "lq",
    growth_k: float = 10.0,
) -> ControlProblem:
    """General linear-quadratic problem with box control set ``[−u_max, u_max]^m``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n = a.shape[0]
    b = _mat(b, (n, n), "B")
    c_arr = np.asarray(C, dtype=float)
    m = 1 if c_arr.ndim < 2 else c_arr.shape[1]
    F, G = _mat(F, (n, n), "F"), _mat(G, (n, n), "G")
    C, D = _mat(C, (n, m), "C"), _mat(D, (n, m), "D")
    Q, M = _mat(Q, (n, n), "Q"), _mat(M, (n, n), "M")
    R = _mat(R, (m, m), "R")
    r = np.broadcast_to(np.asarray(r, dtype=float), (n,)).copy()
    for name_, s in (("Q", Q), ("M", M)):
        if not np.allclose(s, s.T) or np.linalg.eigvalsh(s)[0] < -1e-12:
            raise ConfigurationError(f"{name_} must be symmetric positive semidefinite")
    if not np.allclose(R, R.T) or np.linalg.eigvalsh(R)[0] <= 0:
        raise ConfigurationError("R must be symmetric positive definite")
    triple = triple or GelfandTriple.identity(n)
    if big_k is None:
        sym = -kappa * triple.v_gram - 0.5 * (a + a.T) - b.T @ b
        need = max(0.0, -float(np.linalg.eigvalsh(sym)[0]))
        bound = float(np.max(np.linalg.eigvals(np.linalg.solve(triple.v_gram, a.T @ triple.solve(a.T).T)).real))
        big_k = max(1.0, need, bound)
    pair = EvolutionOperatorPair(a, b, kappa, big_k)
    rep = check_coercivity(pair, triple)
    if not rep.passed:
        raise ConfigurationError(
            f"operator pair is not coercive/bounded: exact margin {rep.exact_margin:.6g}, "
            f"bound ratio {rep.details['bound_ratio']:.6g} vs K = {big_k}")
    data = LQData(F, C, G, D, Q, R, M, r)
    u_set = ControlSet.box(-u_max * np.ones(m), u_max * np.ones(m), resolution)

    def f(t, x, u):
        return x @ F.T + np.asarray(u) @ C.T

    def g(t, x, u):
        return x @ G.T + np.asarray(u) @ D.T

    def l(t, x, u):
        e = x - r
        u = np.asarray(u)
        return 0.5 * np.einsum("...i,ij,...j->...", e, Q, e) + 0.5 * np.einsum("...i,ij,...j->...", u, R, u)

    problem = ControlProblem(
        name=name, triple=triple, pair=pair, control_set=u_set,
        x0=np.broadcast_to(np.asarray(x0, dtype=float), (n,)).copy(),
        f=f, f_x=lambda t, x, u: F, g=g, g_x=lambda t, x, u: G,
        l=l, l_x=lambda t, x, u: (x - r) @ Q, l_xx=lambda t, x, u: Q,
        h=lambda x: 0.5 * np.einsum("...i,ij,...j->...", x, M, x),
        h_x=lambda x: x @ M, h_xx=lambda x: M,
        lq=data, growth_k=growth_k,
        params={"u_max": u_max, "kappa": kappa, "K": big_k},
    )
    return _admit(problem)


def lq_scalar(a=-1.0, b=0.5, c=1.0, d=0.0, f=0.0, g=0.0, q=1.0, r=1.0, m=1.0,
              x0=1.0, u_max=3.0, kappa=0.5, big_k=None, resolution=21):
    """Scalar LQ problem and its Riccati oracle ``(problem, RiccatiSolution)``."""
    from .bsee import solve_riccati

    if q < 0 or m < 0 or r <= 0:
        raise ConfigurationError("need q >= 0, m >= 0 and r > 0")
    problem = lq(a, b, F=f, C=c, G=g, D=d, Q=q, R=r, M=m, x0=x0, u_max=u_max,
                 kappa=kappa, big_k=big_k, resolution=resolution, name="lq_scalar")
    return problem, solve_riccati(problem)


def heat_transport(n: int = 8, kappa: float = 1.0, speed: float = 0.3, sigma: float = 0.2,
                   q: float = 1.0, rho: float = 0.1, m: float = 0.0, target: float = 1.0,
                   u_max: float = 5.0, kappa_c: float = 0.25, big_k: float = 4.0):
    """Controlled heat equation with transport noise on n interior nodes.

    ``A = κΔ_h``, ``B = speed·∂_h`` (central, skew), ``f = c·u`` with a
    sine profile ``c``, ``g = σx``, and a quadratic tracking cost toward the
    profile ``target·c``. The V-norm is the discrete H¹₀ norm.
    """
    if n not in (8, 32):
        raise ConfigurationError("heat_transport supports n in {8, 32}")
    grid_x = np.arange(1, n + 1) / (n + 1)
    profile = np.sin(np.pi * grid_x)
    triple = GelfandTriple.laplacian1d(n)
    a = kappa * laplacian1d(n)
    b = transport1d(n, speed)
    pair = EvolutionOperatorPair(a, b, kappa_c, big_k)
    rep = check_coercivity(pair, triple)
    if not rep.passed:
        raise ConfigurationError(
            f"speed {speed} breaks coercivity: exact margin {rep.exact_margin:.6g}, "
            f"bound ratio {rep.details['bound_ratio']:.6g}")
    problem = lq(a, b, F=0.0, C=profile[:, None], G=sigma, D=0.0, Q=q / n, R=rho, M=m / n,
                 r=target * profile, x0=np.zeros(n), u_max=u_max, kappa=kappa_c,
                 big_k=big_k, triple=triple, name="heat_transport", growth_k=10.0)
    return problem


def nonconvex_diffusion(sigma: float = 1.0, sigma_minus: float | None = None, m: float = -2.0,
                        a: float = -0.5, b: float = 0.5, x0: float = 0.0,
                        kappa: float = 0.5, big_k: float = 1.0):
    """Scalar problem with the control only in the diffusion and ``U = {0, −1, +1}``.

    ``g(u) = σ₊u`` for ``u ≥ 0`` and ``σ₋u`` otherwise, ``f = 0``, ``l = 0``
    and ``h = ½mx²``. From ``x₀ = 0`` the candidate ``ū ≡ 0`` keeps
    ``x̄ ≡ 0`` so the adjoint ``(p, q)`` vanishes and only the second-order
    term of the maximum condition distinguishes the candidates.
    """
    s_minus = sigma if sigma_minus is None else sigma_minus
    pair = EvolutionOperatorPair(np.array([[a]]), np.array([[b]]), kappa, big_k)
    zero = np.zeros((1, 1))

    def g(t, x, u):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(np.where(u >= 0, sigma, s_minus) * u, np.shape(x)).copy()

    problem = ControlProblem(
        name="nonconvex_diffusion", triple=GelfandTriple.identity(1), pair=pair,
        control_set=ControlSet.finite([[0.0], [-1.0], [1.0]], origin=[0.0]),
        x0=np.array([float(x0)]),
        f=lambda t, x, u: np.zeros(np.shape(x)), f_x=lambda t, x, u: zero,
        g=g, g_x=lambda t, x, u: zero,
        l=lambda t, x, u: np.zeros(np.shape(x)[:-1]), l_x=lambda t, x, u: np.zeros(np.shape(x)),
        l_xx=lambda t, x, u: zero,
        h=lambda x: 0.5 * m * np.sum(x * x, axis=-1), h_x=lambda x: m * x,
        h_xx=lambda x: m * np.eye(1),
        params={"sigma": sigma, "sigma_minus": s_minus, "m": m, "a": a, "b": b},
    )
    return _admit(problem)


def nonlinear_scalar(alpha: float = 0.5, beta: float = 1.0, gamma: float = 0.3,
                     delta: float = 0.5, a: float = -0.5, b: float = 0.2, q: float = 1.0,
                     r: float = 1.0, m: float = 1.0, x0: float = 0.5, u_max: float = 1.0,
                     kappa: float = 0.5, big_k: float = 1.0):
    """Scalar problem with smooth nonlinear coefficients.

    ``f = α sin x + β u cos x``, ``g = γ sin x + δu``,
    ``l = ½qx² + ½ru²``, ``h = m log cosh x``.
    """
    pair = EvolutionOperatorPair(np.array([[a]]), np.array([[b]]), kappa, big_k)

    def f(t, x, u):
        return alpha * np.sin(x) + beta * u * np.cos(x)

    def f_x(t, x, u):
        return (alpha * np.cos(x) - beta * u * np.sin(x))[..., None]

    def f_xx(t, x, u, v, w):
        return (-alpha * np.sin(x) - beta * u * np.cos(x)) * v * w

    def g(t, x, u):
        return gamma * np.sin(x) + delta * u * np.ones_like(x)

    def g_x(t, x, u):
        return (gamma * np.cos(x))[..., None]

    def g_xx(t, x, u, v, w):
        return -gamma * np.sin(x) * v * w

    problem = ControlProblem(
        name="nonlinear_scalar", triple=GelfandTriple.identity(1), pair=pair,
        control_set=ControlSet.box([-u_max], [u_max], 21), x0=np.array([float(x0)]),
        f=f, f_x=f_x, f_xx=f_xx, g=g, g_x=g_x, g_xx=g_xx,
        l=lambda t, x, u: 0.5 * q * np.sum(x * x, axis=-1) + 0.5 * r * np.sum(np.asarray(u) ** 2, axis=-1),
        l_x=lambda t, x, u: q * x, l_xx=lambda t, x, u: q * np.eye(1),
        h=lambda x: m * np.sum(np.log(np.cosh(x)), axis=-1), h_x=lambda x: m * np.tanh(x),
        h_xx=lambda x: (m / np.cosh(x) ** 2)[..., None],
        growth_k=10.0,
        params={"alpha": alpha, "beta": beta, "gamma": gamma, "delta": delta},
    )
    return _admit(problem)


CATALOG = {
    "lq_scalar": lq_scalar,
    "heat_transport": heat_transport,
    "nonconvex_diffusion": nonconvex_diffusion,
    "nonlinear_scalar": nonlinear_scalar,
}


def build(name: str, params: dict | None = None):
    """Construct a catalog problem by name; returns ``(problem, oracle_or_None)``."""
    if name not in CATALOG:
        raise UnknownProblemError(f"unknown problem {name!r}; choose from {sorted(CATALOG)}")
    factory = CATALOG[name]
    params = dict(params or {})
    allowed = set(inspect.signature(factory).parameters)
    unknown = set(params) - allowed
    if unknown:
        raise ConfigurationError(f"unknown parameters for {name}: {sorted(unknown)}")
    out = factory(**params)
    return out if isinstance(out, tuple) else (out, None)
