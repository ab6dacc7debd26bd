#!/usr/bin/env python3
"""
Gaussian block working model

Masked data block, matrix-normal inverse-Wishart prior, conjugate
complete-data posterior, conditional Gaussian imputation law, inverse-Wishart
mode and draws, and matrix-normal draws.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from config import JITTER_MIN, JITTER_RETRIES
from errors import (
    BlockValidationError, DegreesOfFreedomTooSmall, IllConditioned, NotPositiveDefinite,
    SingularDesign, ValidationError,
)
from chain_state import StabilizationEvent, StabilizationKind
from spd_linalg import cholesky, jitter_amount, symmetrize

logger = logging.getLogger(__name__)


def default_column_names(p):
    width = max(2, len(str(p)))
    return tuple(f"y{j + 1:0{width}d}" for j in range(p))


# ==================== DATA BLOCK ====================

@dataclass(frozen=True, eq=False)
class MaskedBlock:
    """
    Observed response block with an explicit observation mask

    Y holds the data (missing cells are stored as 0.0 and never read),
    R is True where a cell is observed, X is the fully observed design.
    """
    Y: np.ndarray
    R: np.ndarray
    X: np.ndarray
    columns: Sequence[str] = ()

    def __post_init__(self):
        Y = np.array(self.Y, dtype=float)
        R = np.asarray(self.R).astype(bool)
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]

        if Y.ndim != 2:
            raise BlockValidationError(f"Y must be a matrix, got shape {Y.shape}")
        if R.shape != Y.shape:
            raise BlockValidationError(f"mask shape {R.shape} does not match Y shape {Y.shape}")
        if X.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise BlockValidationError(f"design must have {Y.shape[0]} rows, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise BlockValidationError("design matrix must be fully observed and finite")
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise BlockValidationError("design matrix does not have full column rank")
        if not np.all(np.isfinite(Y[R])):
            raise BlockValidationError("observed cells must be finite")
        empty = np.flatnonzero(R.sum(axis=0) == 0)
        if empty.size:
            raise BlockValidationError(f"columns without observed entries: {empty.tolist()}")

        Y[~R] = 0.0
        columns = tuple(self.columns) or default_column_names(Y.shape[1])
        if len(columns) != Y.shape[1]:
            raise BlockValidationError(f"expected {Y.shape[1]} column names, got {len(columns)}")

        for array in (Y, R, X):
            array.setflags(write=False)
        object.__setattr__(self, 'Y', Y)
        object.__setattr__(self, 'R', R)
        object.__setattr__(self, 'X', X)
        object.__setattr__(self, 'columns', columns)

    @classmethod
    def from_nan(cls, Y, X, columns=()):
        """Build a block from a matrix whose missing cells are NaN"""
        Y = np.asarray(Y, dtype=float)
        return cls(np.where(np.isnan(Y), 0.0, Y), ~np.isnan(Y), X, columns)

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def p(self):
        return self.Y.shape[1]

    @property
    def k(self):
        return self.X.shape[1]

    @property
    def n_missing(self):
        return int((~self.R).sum())

    @property
    def is_complete(self):
        return bool(self.R.all())

    def with_nan(self):
        out = np.array(self.Y, dtype=float)
        out[~self.R] = np.nan
        return out

    def hide(self, cells):
        """Return a copy in which the given observed cells are treated as missing"""
        cells = np.asarray(cells, dtype=bool)
        if cells.shape != self.R.shape:
            raise BlockValidationError(f"hide mask shape {cells.shape} does not match block")
        if np.any(cells & ~self.R):
            raise BlockValidationError("can only hide observed cells")
        return MaskedBlock(self.Y, self.R & ~cells, self.X, self.columns)

    def observed_bounds(self):
        """Per-column (min, max) over observed cells"""
        data = self.with_nan()
        return np.column_stack([np.nanmin(data, axis=0), np.nanmax(data, axis=0)])

    def available_case_correlation(self):
        """Pairwise-complete Pearson correlation; undefined pairs are 0"""
        corr = pd.DataFrame(self.with_nan()).corr(min_periods=3).to_numpy()
        corr = np.nan_to_num(corr, nan=0.0)
        np.fill_diagonal(corr, 1.0)
        return corr


def screen_columns(corr, size):
    """
    For every column, pick the `size` other columns with largest |corr|

    Returns:
        list: one sorted index array per column
    """
    corr = np.abs(np.asarray(corr, dtype=float))
    p = corr.shape[0]
    size = max(0, min(int(size), p - 1))
    chosen = []
    for j in range(p):
        if size == 0:
            chosen.append(np.empty(0, dtype=int))
            continue
        scores = corr[j].copy()
        scores[j] = -np.inf
        order = np.argsort(-scores, kind='stable')[:size]
        chosen.append(np.sort(order))
    return chosen


# ==================== PRIOR AND POSTERIOR ====================

@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Matrix-normal inverse-Wishart hyperparameters; V0 is held as precision"""
    nu0: float
    S0: np.ndarray
    B0: np.ndarray
    V0_inv: np.ndarray

    def __post_init__(self):
        S0 = symmetrize(self.S0)
        V0_inv = symmetrize(self.V0_inv)
        B0 = np.atleast_2d(np.asarray(self.B0, dtype=float))
        p, k = S0.shape[0], V0_inv.shape[0]
        if B0.shape != (k, p):
            raise ValidationError(f"B0 must have shape {(k, p)}, got {B0.shape}")
        if not self.nu0 > p + 1:
            raise DegreesOfFreedomTooSmall(f"nu0 must exceed p + 1 = {p + 1}, got {self.nu0}")
        cholesky(S0)
        cholesky(V0_inv)
        object.__setattr__(self, 'S0', S0)
        object.__setattr__(self, 'V0_inv', V0_inv)
        object.__setattr__(self, 'B0', B0)
        object.__setattr__(self, 'nu0', float(self.nu0))

    @classmethod
    def default(cls, p, k, alpha=1.0, nu0_offset=2.0, s0_scale=1.0):
        """B0 = 0, V0^{-1} = alpha I, nu0 = p + offset, prior mean of Sigma = s0_scale I"""
        nu0 = p + nu0_offset
        S0 = s0_scale * (nu0 - p - 1) * np.eye(p)
        return cls(nu0, S0, np.zeros((k, p)), alpha * np.eye(k))

    @property
    def p(self):
        return self.S0.shape[0]

    @property
    def k(self):
        return self.V0_inv.shape[0]


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    Vn: np.ndarray
    Bn: np.ndarray
    Sn: np.ndarray
    nun: float


def _check_complete(Y, X):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != Y.shape[0]:
        raise ValidationError(f"Y has {Y.shape[0]} rows but X has {X.shape[0]}")
    if np.isnan(Y).any():
        raise ValidationError("Y must be complete")
    return Y, X


def coefficient_posterior(Y, X, prior):
    """
    Coefficient part of the conjugate update

    Returns:
        tuple: (factor of X'X + V0^{-1}, Vn, Bn)
    """
    precision = symmetrize(X.T @ X + prior.V0_inv)
    try:
        factor = cholesky(precision)
    except NotPositiveDefinite as e:
        raise SingularDesign(f"X'X + V0^-1 is not positive definite: {e}") from e
    Bn = factor.solve(X.T @ Y + prior.V0_inv @ prior.B0)
    return factor, symmetrize(factor.inverse()), Bn


def complete_data_posterior(Y_complete, X, prior, allow_empty=False):
    """
    Conjugate posterior of (B, Sigma) given a complete block

    Args:
        Y_complete (ndarray): n x p responses without missing cells
        X (ndarray): n x k design
        prior (PriorSpec): hyperparameters
        allow_empty (bool): accept n = 0 and return the prior itself

    Returns:
        PosteriorSummary: (Vn, Bn, Sn, nun)
    """
    Y, X = _check_complete(Y_complete, X)
    n = Y.shape[0]
    if n == 0 and not allow_empty:
        raise ValidationError("complete_data_posterior needs at least one row")

    _, Vn, Bn = coefficient_posterior(Y, X, prior)
    resid = Y - X @ Bn
    diff = Bn - prior.B0
    Sn = prior.S0 + resid.T @ resid + diff.T @ prior.V0_inv @ diff
    return PosteriorSummary(Vn=Vn, Bn=Bn, Sn=symmetrize(Sn), nun=prior.nu0 + n)


def conditional_sigma_scale(B, Y_complete, X, prior):
    """IW(nu_c, S_c) parameters of Sigma given B and a completed block"""
    Y, X = _check_complete(Y_complete, X)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    resid = Y - X @ B
    diff = B - prior.B0
    S_c = prior.S0 + resid.T @ resid + diff.T @ prior.V0_inv @ diff
    return prior.nu0 + Y.shape[0] + X.shape[1], symmetrize(S_c)


# ==================== INVERSE-WISHART AND MATRIX-NORMAL ====================

def iw_mode(nu, S):
    S = symmetrize(S)
    p = S.shape[0]
    if not nu > p + 1:
        raise DegreesOfFreedomTooSmall(f"IW mode needs nu > p + 1 = {p + 1}, got {nu}")
    return S / (nu + p + 1)


def draw_inverse_wishart(rng, nu, S):
    """
    Draw Sigma ~ IW(nu, S) by the Bartlett decomposition

    W = A A' ~ W_p(nu, I) with A lower triangular; Sigma = L W^{-1} L' for
    L L' = S, formed as T' T with T = A^{-1} L'.
    """
    S = symmetrize(S)
    p = S.shape[0]
    if not nu > p - 1:
        raise DegreesOfFreedomTooSmall(f"IW draw needs nu > p - 1 = {p - 1}, got {nu}")
    lower = cholesky(S).lower

    bartlett = np.zeros((p, p))
    bartlett[np.diag_indices(p)] = np.sqrt(rng.chisquare(nu - np.arange(p)))
    rows, cols = np.tril_indices(p, -1)
    bartlett[rows, cols] = rng.standard_normal(rows.size)

    T = linalg.solve_triangular(bartlett, lower.T, lower=True)
    return symmetrize(T.T @ T)


def draw_matrix_normal(rng, Bn, Vn, Sigma, noise=None):
    """B = Bn + L_V Z L_Sigma' with Z standard normal (or the supplied noise)"""
    Bn = np.atleast_2d(np.asarray(Bn, dtype=float))
    L_V = cholesky(symmetrize(Vn)).lower
    L_S = cholesky(symmetrize(Sigma)).lower
    Z = rng.standard_normal(Bn.shape) if noise is None else np.asarray(noise, dtype=float)
    return Bn + L_V @ Z @ L_S.T


# ==================== CONDITIONAL GAUSSIAN ====================

def _conditional_law(Sigma, obs_idx, mis_idx):
    """Gain Sigma_MO Sigma_OO^{-1} and Schur complement, via Cholesky solves"""
    if obs_idx.size == 0:
        return np.zeros((mis_idx.size, 0)), symmetrize(Sigma[np.ix_(mis_idx, mis_idx)])
    factor = cholesky(Sigma[np.ix_(obs_idx, obs_idx)])
    cross = Sigma[np.ix_(obs_idx, mis_idx)]
    solved = factor.solve(cross)
    gain = solved.T
    cov = Sigma[np.ix_(mis_idx, mis_idx)] - cross.T @ solved
    return gain, symmetrize(cov)


def conditional_gaussian(row_mean, Sigma, y_obs, obs_idx, mis_idx):
    """
    Conditional law of the missing sub-vector given the observed one

    Returns:
        tuple: (conditional mean over mis_idx, conditional covariance)

    Raises:
        IllConditioned: when Sigma_OO cannot be factored
    """
    row_mean = np.asarray(row_mean, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    obs_idx = np.asarray(obs_idx, dtype=int)
    mis_idx = np.asarray(mis_idx, dtype=int)
    if sorted(np.concatenate([obs_idx, mis_idx]).tolist()) != list(range(Sigma.shape[0])):
        raise ValidationError("obs_idx and mis_idx must partition the coordinates")
    try:
        gain, cov = _conditional_law(Sigma, obs_idx, mis_idx)
    except NotPositiveDefinite as e:
        raise IllConditioned(f"Sigma_OO factorization failed: {e}") from e
    mean = row_mean[mis_idx] + gain @ (np.asarray(y_obs, dtype=float) - row_mean[obs_idx])
    return mean, cov


def _jitter_schedule(eps):
    """First attempt at eps, then JITTER_RETRIES escalating retries"""
    base = eps if eps > 0 else JITTER_MIN
    start = 1 if eps > 0 else 0
    return [eps] + [base * 10 ** i for i in range(start, start + JITTER_RETRIES)]


def _stable_law(Sigma, obs_idx, mis_idx, eps, need_factor, events, iteration):
    p = Sigma.shape[0]
    for attempt, level in enumerate(_jitter_schedule(eps)):
        working = Sigma if level == 0 else Sigma + jitter_amount(Sigma, level) * np.eye(p)
        try:
            gain, cov = _conditional_law(working, obs_idx, mis_idx)
            lower = cholesky(cov).lower if need_factor else None
        except NotPositiveDefinite:
            continue
        if attempt > 0:
            logger.warning(f"Conditioning needed jitter {level:.1e} at iteration {iteration}")
            if events is not None:
                events.append(StabilizationEvent(StabilizationKind.JITTER, iteration, f"eps={level:.1e}"))
        return gain, lower
    raise IllConditioned(f"conditioning failed after {JITTER_RETRIES} jitter retries at iteration {iteration}")


def impute_missing(Y_star, R, means, Sigma, rng=None, draw=True, eps=0.0,
                   events: Optional[List[StabilizationEvent]] = None, iteration=0):
    """
    Fill or draw every missing cell from its conditional Gaussian law

    Rows are grouped by missingness pattern so each pattern needs a single
    factorization. Observed cells are copied through unchanged.

    Args:
        Y_star (ndarray): current completed block
        R (ndarray): observation mask
        means (ndarray): n x p row means (usually X B)
        Sigma (ndarray): residual covariance
        rng (Generator): required when draw is True
        draw (bool): draw from the conditional law, else use its mean
        eps (float): jitter level applied to Sigma before conditioning
        events (list): stabilization events are appended here
        iteration (int): counter used in event records

    Returns:
        ndarray: a new completed block
    """
    out = np.array(Y_star, dtype=float, copy=True)
    missing = ~np.asarray(R, dtype=bool)
    if not missing.any():
        return out
    Sigma = symmetrize(Sigma)

    patterns, inverse = np.unique(missing, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for g, pattern in enumerate(patterns):
        if not pattern.any():
            continue
        rows = np.flatnonzero(inverse == g)
        mis_idx = np.flatnonzero(pattern)
        obs_idx = np.flatnonzero(~pattern)
        gain, lower = _stable_law(Sigma, obs_idx, mis_idx, eps, draw, events, iteration)

        values = means[np.ix_(rows, mis_idx)]
        if obs_idx.size:
            values = values + (out[np.ix_(rows, obs_idx)] - means[np.ix_(rows, obs_idx)]) @ gain.T
        if draw:
            values = values + rng.standard_normal((rows.size, mis_idx.size)) @ lower.T
        out[np.ix_(rows, mis_idx)] = values
    return out
