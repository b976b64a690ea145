"""Dense float64 kernels: matvec, damped SPD solves, symmetric eigendecomposition
and matrix-free Kronecker products.

Matrices are plain 2-D ``numpy.ndarray`` objects. Every entry point converts to
float64 and validates shapes so callers get a :class:`DimensionError` instead of
a numpy broadcasting surprise.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import DimensionError, FactorizationError, NotSymmetricError, NumericalError

SYMMETRY_TOL = 1e-8


class EigenDecomposition(NamedTuple):
    eigenvectors: np.ndarray  # orthonormal columns
    eigenvalues: np.ndarray  # ascending

    def reconstruct(self) -> np.ndarray:
        q, lam = self.eigenvectors, self.eigenvalues
        return (q * lam) @ q.T


def as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("matrix contains non-finite entries")
    return m


def _as_vector(v, n: int, what: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != n:
        raise DimensionError(f"{what} has shape {v.shape}, expected ({n},)")
    return v


def check_symmetric(m: np.ndarray, tol: float = SYMMETRY_TOL) -> None:
    if m.shape[0] != m.shape[1]:
        raise NotSymmetricError(f"matrix is not square: {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    if asym > tol * scale:
        raise NotSymmetricError(f"matrix asymmetry {asym:.3e} exceeds {tol:.1e} (scaled)")


def matvec(m, v) -> np.ndarray:
    m = as_matrix(m)
    return m @ _as_vector(v, m.shape[1])


class CholeskySolver:
    """Factor ``m + damping*I`` once, solve many right-hand sides.

    No pseudo-inverse fallback: a failed factorization is an error.
    """

    def __init__(self, m, damping: float = 0.0):
        m = as_matrix(m)
        check_symmetric(m)
        if damping < 0:
            raise ValueError("damping must be nonnegative")
        self.dim = m.shape[0]
        self.damping = float(damping)
        a = m + self.damping * np.eye(self.dim)
        try:
            self._factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(
                f"matrix + {damping:g}*I is not positive definite ({exc})"
            ) from exc

    def solve(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.dim:
            raise DimensionError(f"right-hand side has length {v.shape[0]}, expected {self.dim}")
        return scipy.linalg.cho_solve(self._factor, v, check_finite=False)


def solve_spd(m, v, damping: float = 0.0) -> np.ndarray:
    """Return x with (m + damping*I) x = v."""
    m = as_matrix(m)
    v = _as_vector(v, m.shape[0], "right-hand side")
    return CholeskySolver(m, damping).solve(v)


def eig_sym(m) -> EigenDecomposition:
    m = as_matrix(m)
    check_symmetric(m)
    lam, q = np.linalg.eigh(0.5 * (m + m.T))
    return EigenDecomposition(q, lam)


def kron_apply(a, b, v) -> np.ndarray:
    """(a ⊗ b) @ v without forming the Kronecker product.

    With v laid out row-major as V of shape (a.cols, b.cols), the product is
    vec_row(a @ V @ b.T).
    """
    a = as_matrix(a)
    b = as_matrix(b)
    v = _as_vector(v, a.shape[1] * b.shape[1])
    vm = v.reshape(a.shape[1], b.shape[1])
    return (a @ vm @ b.T).reshape(-1)
