#!/usr/bin/env python3
"""
Symmetric positive-definite matrix utilities

Factorization, stabilized conditioning, shrinkage and SPD projection used by
every sampler. All functions are pure; callers choose the repair policy so
that chains can log stabilization events.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from config import EIGEN_FLOOR, JITTER_MIN, JITTER_MAX
from errors import (
    NotPositiveDefinite, NonPositiveTrace, InvalidGamma, InvalidTau, InvalidJitter,
    ValidationError,
)


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T equal to the source matrix"""
    lower: np.ndarray

    @property
    def dim(self):
        return self.lower.shape[0]

    def reconstruct(self):
        return self.lower @ self.lower.T

    def solve(self, rhs):
        """Solve A x = rhs without forming A^{-1}"""
        return linalg.cho_solve((self.lower, True), rhs, check_finite=False)

    def inverse(self):
        return self.solve(np.eye(self.dim))

    def log_det(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def _as_square(A, name="matrix"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ValidationError(f"{name} must be a non-empty square matrix, got shape {A.shape}")
    return A


def symmetrize(A):
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + A.T)


def cholesky(A):
    """
    Factor a symmetric matrix

    Args:
        A (ndarray): symmetric p x p matrix

    Returns:
        CholeskyFactor: lower factor with positive diagonal

    Raises:
        NotPositiveDefinite: when any pivot is not strictly positive
    """
    A = _as_square(A)
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefinite("matrix contains non-finite entries")
    try:
        lower = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefinite(f"Cholesky factorization failed: {e}") from e
    if not np.all(np.diag(lower) > 0):
        raise NotPositiveDefinite("Cholesky factor has a non-positive pivot")
    return CholeskyFactor(lower)


def is_spd(A):
    try:
        cholesky(A)
        return True
    except NotPositiveDefinite:
        return False


def jitter_amount(A, eps):
    A = _as_square(A)
    trace = float(np.trace(A))
    if trace <= 0:
        raise NonPositiveTrace(f"trace must be positive for jitter, got {trace}")
    return eps * trace / A.shape[0]


def jitter(A, eps):
    """Return A + (eps * tr(A) / p) * I"""
    if not JITTER_MIN <= eps <= JITTER_MAX:
        raise InvalidJitter(f"eps must lie in [{JITTER_MIN}, {JITTER_MAX}], got {eps}")
    A = _as_square(A)
    delta = jitter_amount(A, eps)
    return A + delta * np.eye(A.shape[0])


def shrink_covariance(S_E, gamma):
    """Linear shrinkage toward the scaled identity: (1-g) S + g (tr S / p) I"""
    if not 0.0 <= gamma <= 1.0:
        raise InvalidGamma(f"gamma must lie in [0, 1], got {gamma}")
    S_E = symmetrize(_as_square(S_E, "S_E"))
    p = S_E.shape[0]
    trace = float(np.trace(S_E))
    if gamma > 0 and trace <= 0:
        raise NonPositiveTrace(f"trace must be positive when gamma > 0, got {trace}")
    if gamma == 0:
        return S_E
    return (1.0 - gamma) * S_E + gamma * (trace / p) * np.eye(p)


def ridge_covariance(S_E, tau):
    """Ridge regularization S + tau I"""
    if not tau > 0:
        raise InvalidTau(f"tau must be positive, got {tau}")
    S_E = symmetrize(_as_square(S_E, "S_E"))
    return S_E + tau * np.eye(S_E.shape[0])


def nearest_spd(A):
    """
    Project a symmetric matrix onto the SPD cone by eigenvalue clamping

    Eigenvalues below f = max(1e-8, 1e-8 * lambda_max) are raised to f and the
    matrix is reassembled from the original eigenvectors.
    """
    A = symmetrize(_as_square(A))
    values, vectors = np.linalg.eigh(A)
    floor = max(EIGEN_FLOOR, EIGEN_FLOOR * float(values[-1]))
    if values[0] >= floor:
        return A
    clamped = np.maximum(values, floor)
    return symmetrize((vectors * clamped) @ vectors.T)
