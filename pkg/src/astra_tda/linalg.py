"""Dense linear-algebra kernel.

Symmetric eigendecomposition by cyclic Jacobi rotations, Kronecker-structured
matrix-vector products, and rank correlation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised on non-finite values or a numerically undefined result."""


class UndefinedCorrelationError(NumericError):
    """Raised when a rank correlation is requested for a constant vector."""


@dataclass(frozen=True)
class EigenPair:
    """Eigendecomposition ``m = basis @ diag(values) @ basis.T``.

    Columns of ``basis`` are eigenvectors; ``values`` are ascending.
    """

    basis: np.ndarray
    values: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.basis * self.values) @ self.basis.T


def _as_finite_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains non-finite entries")
    return m


def sym_eigh(m) -> EigenPair:
    """Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.

    The input is symmetrized as ``(m + m.T) / 2`` first. Sweeps stop once the
    largest off-diagonal magnitude drops below ``1e-12 * ||m||_F`` (at most
    100 sweeps).
    """
    m = _as_finite_matrix(m)
    n, k = m.shape
    if n != k:
        raise DimensionError(f"sym_eigh needs a square matrix, got {m.shape}")
    a = 0.5 * (m + m.T)
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n == 1 or scale == 0.0:
        return _sorted_pair(v, np.diag(a).copy())
    tol = JACOBI_TOL * scale
    iu = np.triu_indices(n, 1)
    for _ in range(JACOBI_MAX_SWEEPS):
        if np.max(np.abs(a[iu])) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < tol * 1e-3:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- R^T A R with R the (p, q) Givens rotation
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return _sorted_pair(v, np.diag(a).copy())


def _sorted_pair(basis: np.ndarray, values: np.ndarray) -> EigenPair:
    order = np.argsort(values, kind="stable")
    return EigenPair(basis=basis[:, order].copy(), values=values[order].copy())


def kron_apply(a, b, v) -> np.ndarray:
    """Compute ``(a ⊗ b) @ v`` without forming the Kronecker product.

    Uses the column-major identity ``(A ⊗ B) vec(V) = vec(B V A^T)`` where
    ``V`` has ``b.shape[1]`` rows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or v.ndim != 1:
        raise DimensionError("kron_apply expects two matrices and a vector")
    if v.size != a.shape[1] * b.shape[1]:
        raise DimensionError(
            f"vector length {v.size} != {a.shape[1]} * {b.shape[1]}"
        )
    mat = v.reshape((b.shape[1], a.shape[1]), order="F")
    return (b @ mat @ a.T).ravel(order="F")


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise DimensionError("spearman needs two 1-D vectors of equal length")
    if x.size < 2:
        raise DimensionError("spearman needs at least two observations")
    rx = rankdata(x) - 0.5 * (x.size + 1)
    ry = rankdata(y) - 0.5 * (y.size + 1)
    nx = np.sqrt(rx @ rx)
    ny = np.sqrt(ry @ ry)
    if nx == 0.0 or ny == 0.0:
        raise UndefinedCorrelationError("rank correlation undefined for a constant vector")
    return float(np.clip((rx @ ry) / (nx * ny), -1.0, 1.0))
