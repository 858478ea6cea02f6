"""Finite-dimensional Gelfand triple V ⊂ H ⊂ V*.

H is R^n with the Euclidean inner product and is identified with its dual.
V is the same vector space carrying the norm ``‖x‖_V² = xᵀGx`` for a symmetric
positive-definite Gram matrix ``G``. The duality pairing ``⟨x, f⟩_*`` is the
Euclidean dot product in coordinates, so the V*-norm is ``fᵀG⁻¹f``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class DimensionError(ValueError):
    """Raised when a vector or matrix does not match the space dimension."""


def stiffness1d(n: int) -> np.ndarray:
    """Dirichlet stiffness matrix ``-Δ_h`` on ``n`` interior nodes of [0, 1]."""
    h = 1.0 / (n + 1)
    return (2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)) / h**2


def _check_vec(x, dim: int, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != dim:
        raise DimensionError(f"{name} has trailing dimension {x.shape[-1:] or '()'}, expected {dim}")
    return x


@dataclass(frozen=True, eq=False)
class GelfandTriple:
    """Truncated V ⊂ H ⊂ V* with V-norm Gram matrix ``v_gram``.

    The Cholesky factor of the Gram matrix is computed once at construction
    and reused by :func:`dual_norm_sq`.
    """

    v_gram: np.ndarray
    _chol: tuple = field(init=False, repr=False)
    lambda_min: float = field(init=False)

    def __post_init__(self):
        g = np.array(self.v_gram, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] < 1:
            raise DimensionError(f"Gram matrix must be square, got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("Gram matrix has non-finite entries")
        if not np.array_equal(g, g.T):
            raise ValueError("Gram matrix must be exactly symmetric")
        try:
            chol = cho_factor(g, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Gram matrix is not positive definite") from exc
        g.setflags(write=False)
        object.__setattr__(self, "v_gram", g)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "lambda_min", float(np.linalg.eigvalsh(g)[0]))

    @property
    def dim(self) -> int:
        return self.v_gram.shape[0]

    @property
    def embedding_constant(self) -> float:
        """Largest c with ``‖x‖_V ≥ c‖x‖_H``, i.e. ``sqrt(λ_min(G))``."""
        return float(np.sqrt(self.lambda_min))

    def solve(self, f) -> np.ndarray:
        """Return ``G⁻¹f`` (trailing axis is the vector axis)."""
        f = _check_vec(f, self.dim, "f")
        flat = f.reshape(-1, self.dim).T
        return cho_solve(self._chol, flat).T.reshape(f.shape)

    @classmethod
    def identity(cls, n: int) -> "GelfandTriple":
        return cls(np.eye(n))

    @classmethod
    def laplacian1d(cls, n: int) -> "GelfandTriple":
        """V = discrete H¹₀: ``G = I + stiffness``."""
        return cls(np.eye(n) + stiffness1d(n))

    @classmethod
    def from_config(cls, cfg: dict) -> "GelfandTriple":
        """Build from ``{dim, vGram}`` where vGram is a row-major list or ``"laplacian1d"``."""
        dim = int(cfg["dim"])
        gram = cfg.get("vGram", "identity")
        if gram == "laplacian1d":
            return cls.laplacian1d(dim)
        if gram == "identity":
            return cls.identity(dim)
        g = np.asarray(gram, dtype=float)
        if g.ndim == 1 and g.size == dim * dim:
            g = g.reshape(dim, dim)
        if g.shape != (dim, dim):
            raise DimensionError(f"vGram has shape {g.shape}, expected {(dim, dim)}")
        return cls(g)


def h_inner(x, y) -> np.ndarray | float:
    """Euclidean inner product of H, vectorised over leading axes."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1:] != y.shape[-1:]:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    out = np.einsum("...i,...i->...", x, y)
    return float(out) if np.ndim(out) == 0 else out


def v_norm_sq(triple: GelfandTriple, x) -> np.ndarray | float:
    x = _check_vec(x, triple.dim)
    out = np.einsum("...i,ij,...j->...", x, triple.v_gram, x)
    return float(out) if np.ndim(out) == 0 else out


def dual_norm_sq(triple: GelfandTriple, f) -> np.ndarray | float:
    """``fᵀG⁻¹f``: squared V*-norm under the pivot identification H ≅ H*."""
    f = _check_vec(f, triple.dim, "f")
    out = np.einsum("...i,...i->...", f, triple.solve(f))
    return float(out) if np.ndim(out) == 0 else out
