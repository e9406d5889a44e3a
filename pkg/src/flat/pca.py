"""Symmetric eigendecomposition, top-r truncation and projection error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

NEG_EIG_TOL = 1e-10
TIE_TOL = 1e-12


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvectors as columns of ``Q``; ``lam`` sorted descending and clamped at zero."""

    Q: np.ndarray
    lam: np.ndarray

    @property
    def dim(self) -> int:
        return self.lam.shape[0]


@dataclass(frozen=True)
class TruncatedBasis:
    Q_tilde: np.ndarray
    r: int

    def projector(self) -> np.ndarray:
        return self.Q_tilde @ self.Q_tilde.T


def _canonical_signs(Q: np.ndarray) -> np.ndarray:
    # first entry above noise level of each column is made positive
    Q = Q.copy()
    for j in range(Q.shape[1]):
        col = Q[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-10)
        if nz.size and col[nz[0]] < 0:
            Q[:, j] = -col
    return Q


def sym_eig(C: np.ndarray) -> EigenDecomposition:
    """Eigendecomposition of a symmetric PSD matrix in float64.

    The input is symmetrized as ``(C + C^T)/2``. Eigenvalues below
    ``-1e-10 * lambda_max`` raise :class:`NumericalError`; smaller negative
    values are clamped to zero.  Equal eigenvalues are ordered by their
    sign-canonicalized eigenvectors, lexicographically descending.  A zero
    matrix yields zero eigenvalues and the identity basis.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise NumericalError("matrix contains non-finite entries")
    d = C.shape[0]
    S = 0.5 * (C + C.T)
    if not np.any(S):
        return EigenDecomposition(np.eye(d), np.zeros(d))

    lam, Q = np.linalg.eigh(S)
    lam, Q = lam[::-1], Q[:, ::-1]
    top = max(lam[0], 0.0)
    if lam[-1] < -NEG_EIG_TOL * top:
        raise NumericalError(
            f"matrix is not positive semidefinite: eigenvalue {lam[-1]:.3e} vs largest {top:.3e}"
        )
    Q = _canonical_signs(Q)

    # reorder clusters of tied eigenvalues deterministically
    order = list(range(d))
    start = 0
    while start < d:
        end = start + 1
        while end < d and lam[end - 1] - lam[end] <= TIE_TOL * max(top, 1e-300):
            end += 1
        if end - start > 1:
            block = order[start:end]
            order[start:end] = sorted(block, key=lambda j: tuple(Q[:, j]), reverse=True)
        start = end
    Q = Q[:, order]
    lam = np.maximum(lam[order], 0.0)
    return EigenDecomposition(Q, lam)


def truncate(eig: EigenDecomposition, r: int) -> TruncatedBasis:
    if not 1 <= r <= eig.dim:
        raise ValueError(f"rank {r} out of range [1, {eig.dim}]")
    return TruncatedBasis(eig.Q[:, :r].copy(), int(r))


def project(Y: np.ndarray, basis: TruncatedBasis) -> np.ndarray:
    """``Y Q~ Q~^T``: rank-r reconstruction of ``Y``."""
    return (Y @ basis.Q_tilde) @ basis.Q_tilde.T


def reconstruction_error(Y: np.ndarray, basis: TruncatedBasis) -> float:
    """Squared Frobenius norm ``||Y - Y Q~ Q~^T||_F^2``."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != basis.Q_tilde.shape[0]:
        raise ValueError(f"Y of shape {Y.shape} does not match basis dimension {basis.Q_tilde.shape[0]}")
    R = Y - project(Y, basis)
    return float(np.sum(R * R))


def tail_sum(eig: EigenDecomposition, r: int) -> float:
    """Sum of the eigenvalues dropped by a rank-r truncation."""
    return float(np.sum(eig.lam[r:]))
