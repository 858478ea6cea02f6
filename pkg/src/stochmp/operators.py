"""Stochastic evolution operators A(t), B(t) and checks of their structure.

Operators are n×n matrices. They may be constant, deterministic functions of
time ``t -> matrix``, or (with ``random=True``) functions ``(t, w) -> matrix``
that receive the Wiener value ``W_t`` of every path and return one matrix per
path, shape ``(paths, n, n)``.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gelfand import GelfandTriple, stiffness1d

MARGIN_TOL = 1e-10


class OperatorDataError(ValueError):
    """Non-finite or malformed operator data."""


@dataclass
class ValidationReport:
    """Outcome of a structural check.

    ``margin`` is the sampled worst case, ``exact_margin`` the worst case
    from a dense symmetric eigensolve (``None`` when not applicable).
    """

    name: str
    passed: bool
    margin: float
    exact_margin: float | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "margin": float(self.margin),
            "exact_margin": None if self.exact_margin is None else float(self.exact_margin),
            **{k: v for k, v in self.details.items()},
        }


def _as_matrix(m, name: str) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[-1] != m.shape[-2]:
        raise OperatorDataError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise OperatorDataError(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True, eq=False)
class EvolutionOperatorPair:
    """The pair (A, B) together with the coercivity constants κ and K."""

    a: np.ndarray | Callable
    b: np.ndarray | Callable
    kappa: float
    big_k: float
    random: bool = False

    def __post_init__(self):
        if not callable(self.a):
            object.__setattr__(self, "a", _as_matrix(self.a, "A"))
        if not callable(self.b):
            object.__setattr__(self, "b", _as_matrix(self.b, "B"))
        if self.kappa <= 0 or self.big_k < 0:
            raise ValueError(f"need kappa > 0 and K >= 0, got {self.kappa}, {self.big_k}")

    @classmethod
    def constant(cls, a, b, kappa: float = 0.5, big_k: float = 1.0) -> "EvolutionOperatorPair":
        return cls(a, b, kappa, big_k)

    @property
    def is_constant(self) -> bool:
        return not callable(self.a) and not callable(self.b)

    @property
    def dim(self) -> int:
        a, _ = self.at(0.0, None if not self.random else np.zeros(1))
        return a.shape[-1]

    def at(self, t: float, w=None) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(A(t), B(t))``; ``w`` is the Wiener value, used only when ``random``."""
        return self._eval(self.a, t, w, "A"), self._eval(self.b, t, w, "B")

    def _eval(self, op, t, w, name):
        if not callable(op):
            return op
        out = op(t, w) if self.random else op(t)
        return _as_matrix(out, name)


# -- config shorthands -----------------------------------------------------

def laplacian1d(n: int, dirichlet: bool = True) -> np.ndarray:
    """Discrete Laplacian ``Δ_h`` (negative semidefinite)."""
    if not dirichlet:
        raise NotImplementedError("only Dirichlet boundary conditions are modelled")
    return -stiffness1d(n)


def transport1d(n: int, speed: float = 1.0) -> np.ndarray:
    """Central difference ``speed·∂_x`` with Dirichlet closure; exactly skew-symmetric."""
    h = 1.0 / (n + 1)
    return speed * (np.eye(n, k=1) - np.eye(n, k=-1)) / (2.0 * h)


_SHORTHAND = re.compile(r"^\s*(\w+)\s*\((.*)\)\s*$")


def parse_operator(spec, dim: int | None = None) -> np.ndarray:
    """Parse ``"laplacian1d(n, dirichlet)"``, ``"transport1d(n, speed)"``,
    ``"dense(rows...)"``, a scalar, or a nested list into a matrix."""
    if isinstance(spec, (int, float)):
        return np.full((1, 1), float(spec)) if dim in (None, 1) else float(spec) * np.eye(dim)
    if isinstance(spec, (list, tuple, np.ndarray)):
        return _as_matrix(spec, "operator")
    m = _SHORTHAND.match(str(spec))
    if not m:
        raise ValueError(f"unrecognised operator shorthand {spec!r}")
    name, args = m.group(1), m.group(2)
    if name == "dense":
        rows = ast.literal_eval(f"[{args}]")
        return _as_matrix(rows, "dense")
    parts = [p.strip() for p in args.split(",") if p.strip()]
    if name == "laplacian1d":
        n = int(parts[0])
        dirichlet = len(parts) < 2 or parts[1].lower() in ("dirichlet", "true", "1")
        return laplacian1d(n, dirichlet)
    if name == "transport1d":
        return transport1d(int(parts[0]), float(parts[1]) if len(parts) > 1 else 1.0)
    raise ValueError(f"unknown operator {name!r}")


# -- structural checks -----------------------------------------------------

def _unit_samples(n: int, samples: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((samples, n))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def check_coercivity(
    pair: EvolutionOperatorPair,
    triple: GelfandTriple,
    times=None,
    samples: int = 1000,
    seed: int = 0,
) -> ValidationReport:
    """Check ``⟨x,Ax⟩_* + ‖Bx‖² ≤ −κ‖x‖_V² + K‖x‖²`` and ``‖Ax‖²_{V*} ≤ K‖x‖²_V``.

    For every time in ``times`` the margin
    ``−κ‖x‖_V² + K‖x‖² − ⟨x,Ax⟩ − ‖Bx‖²`` is minimised over random unit
    vectors and, exactly, as the smallest eigenvalue of
    ``−κG + K·I − (A+Aᵀ)/2 − BᵀB``. The boundedness ratio is the largest
    generalised eigenvalue of ``(AᵀG⁻¹A, G)``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    times = [0.0] if times is None else list(np.atleast_1d(times))
    rng = np.random.default_rng(seed)
    g = triple.v_gram
    n = triple.dim
    kappa, big_k = pair.kappa, pair.big_k
    sampled = np.inf
    exact = np.inf
    bound_ratio = 0.0
    worst_t = times[0]
    w = np.zeros(1) if pair.random else None
    for t in times:
        a, b = pair.at(t, w)
        a = a.reshape(-1, n, n)
        b = b.reshape(-1, n, n)
        for a_i, b_i in zip(np.broadcast_to(a, (max(len(a), len(b)), n, n)),
                            np.broadcast_to(b, (max(len(a), len(b)), n, n))):
            x = _unit_samples(n, samples, rng)
            bx = x @ b_i.T
            margins = (
                -kappa * np.einsum("si,ij,sj->s", x, g, x)
                + big_k
                - np.einsum("si,ij,sj->s", x, a_i, x)
                - np.einsum("si,si->s", bx, bx)
            )
            sampled = min(sampled, float(margins.min()))
            sym = -kappa * g + big_k * np.eye(n) - 0.5 * (a_i + a_i.T) - b_i.T @ b_i
            lam = float(np.linalg.eigvalsh(sym)[0])
            if lam < exact:
                exact, worst_t = lam, float(t)
            ata = a_i.T @ triple.solve(a_i.T).T
            ratio = float(np.max(np.linalg.eigvals(np.linalg.solve(g, ata)).real))
            bound_ratio = max(bound_ratio, ratio)
    coercive = exact >= -MARGIN_TOL
    bounded = bound_ratio <= big_k + MARGIN_TOL
    return ValidationReport(
        "coercivity",
        passed=bool(coercive and bounded),
        margin=sampled,
        exact_margin=exact,
        details={"worst_time": worst_t, "bound_ratio": bound_ratio, "bounded": bool(bounded),
                 "coercive": bool(coercive)},
    )


def skew_decompose(b) -> tuple[np.ndarray, np.ndarray]:
    """Split ``B = S + T`` with ``S = (B − Bᵀ)/2`` skew and ``T = (B + Bᵀ)/2`` symmetric."""
    b = _as_matrix(b, "B")
    return 0.5 * (b - b.T), 0.5 * (b + b.T)


def quasi_skew_bound(b) -> float:
    """``max_{‖x‖=1} |⟨x,Bx⟩| = ‖(B+Bᵀ)/2‖₂``."""
    _, t = skew_decompose(b)
    return float(np.max(np.abs(np.linalg.eigvalsh(t)))) if t.size else 0.0


def sampled_quadratic_max(b, samples: int = 200, seed: int = 0, refine_steps: int = 2000) -> float:
    """Estimate ``max_{‖x‖=1} |⟨x,Bx⟩|`` from random unit vectors.

    For each sign the best random start is polished by power iteration on
    ``cI ± T`` (T the symmetric part, ``c`` a Gershgorin bound so both are
    positive semidefinite). The attained values never exceed the exact
    maximum, so the result is a lower bound.
    """
    b = _as_matrix(b, "B")
    _, t = skew_decompose(b)
    x = _unit_samples(b.shape[0], samples, np.random.default_rng(seed))
    vals = np.einsum("si,ij,sj->s", x, t, x)
    best = float(np.abs(vals).max())
    shift = float(np.abs(t).sum(axis=1).max())
    eye = np.eye(t.shape[0])
    for sign, start in ((1.0, int(vals.argmax())), (-1.0, int(vals.argmin()))):
        op = shift * eye + sign * t
        v = x[start]
        for _ in range(refine_steps):
            w = op @ v
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            v = w / nw
        best = max(best, float(abs(v @ t @ v)))
    return best


def check_quasi_skew(b, big_k: float) -> ValidationReport:
    """Check ``|⟨x,Bx⟩| ≤ K‖x‖²``; passes iff ``‖(B+Bᵀ)/2‖₂ ≤ K``."""
    bound = quasi_skew_bound(b)
    return ValidationReport(
        "quasi_skew",
        passed=bool(bound <= big_k + MARGIN_TOL),
        margin=float(big_k - bound),
        exact_margin=float(big_k - bound),
        details={"bound": bound, "K": float(big_k)},
    )
