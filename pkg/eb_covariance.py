#!/usr/bin/env python3
"""
Empirical-Bayes covariance-mode estimator

Builds an equicorrelation target from hypergeometric-corrected pairwise
correlations, estimates the shrinkage intensity from their dispersion, and
returns the posterior mean and mode of the covariance. Also provides the
conjugate covariance-mode update.
"""

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from config import EB_TERMS, EB_MIN_ROWS, EB_LAMBDA_FLOOR, EB_RHO_CLAMP
from errors import DegenerateColumn, InvalidC, TooFewRows, ValidationError
from gaussian_model import conditional_sigma_scale, iw_mode
from spd_linalg import is_spd, nearest_spd, symmetrize

logger = logging.getLogger(__name__)


def gauss_2f1_truncated(a, b, c, x, terms=EB_TERMS):
    """
    Truncated Gauss hypergeometric series

    Sums (a)_m (b)_m / ((c)_m m!) x^m for m = 0 .. terms-1, building the
    coefficients with a running product of Pochhammer ratios. Accepts a scalar
    or an array of x values.

    Raises:
        InvalidC: when a Pochhammer denominator reaches zero
    """
    terms = int(terms)
    if terms < 1:
        raise ValidationError(f"terms must be at least 1, got {terms}")
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1):
        raise ValidationError("series argument must satisfy |x| <= 1")

    m = np.arange(terms - 1, dtype=float)
    denominators = (c + m) * (m + 1)
    if np.any(denominators == 0):
        raise InvalidC(f"c = {c} hits a zero Pochhammer denominator within {terms} terms")
    coefficients = np.concatenate([[1.0], np.cumprod((a + m) * (b + m) / denominators)])

    powers = x[..., None] ** np.arange(terms)
    value = np.sum(coefficients * powers, axis=-1)
    return float(value) if value.ndim == 0 else value


@dataclass(frozen=True, eq=False)
class EbFit:
    Z: np.ndarray
    rho_bar: float
    lambda_eb: float
    Sigma_mode: np.ndarray
    Sigma_mean: np.ndarray
    spd_projected: bool = False
    lambda_clamped: bool = False
    k2: float = float('nan')

    def fingerprint(self):
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.Sigma_mode).tobytes())
        digest.update(np.float64(self.lambda_eb).tobytes())
        return digest.hexdigest()[:16]


def _shrinkage_intensity(alpha, beta, rho_bar):
    """lambda = 1/k2 - 3, clamped to the floor when k2 <= 0 or the result is not positive"""
    k2 = float(np.mean(beta - 2.0 * alpha * rho_bar + rho_bar ** 2) / (1.0 - rho_bar ** 2) ** 2)
    if k2 <= 0 or 1.0 / k2 - 3.0 <= 0:
        return EB_LAMBDA_FLOOR, k2, True
    return 1.0 / k2 - 3.0, k2, False


def eb_covariance_fit(W, terms=EB_TERMS):
    """
    Fit the empirical-Bayes covariance mean and mode to a residual matrix

    Args:
        W (ndarray): n x p residuals of the current completed block
        terms (int): truncation of the hypergeometric series

    Returns:
        EbFit: target, common correlation, intensity, mean and mode
    """
    W = np.asarray(W, dtype=float)
    if W.ndim != 2:
        raise ValidationError(f"W must be a matrix, got shape {W.shape}")
    n, p = W.shape
    if n < EB_MIN_ROWS:
        raise TooFewRows(f"the EB fit needs at least {EB_MIN_ROWS} rows, got {n}")
    if p < 2:
        raise ValidationError("the EB fit needs at least 2 columns")

    S_W = symmetrize(np.cov(W, rowvar=False, ddof=1))
    variances = np.diag(S_W).copy()
    if np.any(variances <= 0):
        raise DegenerateColumn(f"zero-variance residual columns: {np.flatnonzero(variances <= 0).tolist()}")
    sd = np.sqrt(variances)
    R_W = np.clip(S_W / np.outer(sd, sd), -1.0, 1.0)

    iu = np.triu_indices(p, 1)
    r = R_W[iu]
    x = 1.0 - r ** 2
    alpha = r * gauss_2f1_truncated(0.5, 0.5, (n - 1) / 2.0, x, terms)
    beta = 1.0 - (n - 2) * x / (n - 1) * gauss_2f1_truncated(1.0, 1.0, (n + 1) / 2.0, x, terms)

    rho_bar = float(np.clip(np.mean(alpha), -EB_RHO_CLAMP, EB_RHO_CLAMP))
    lam, k2, clamped = _shrinkage_intensity(alpha, beta, rho_bar)
    if clamped:
        logger.debug(f"EB intensity clamped to {lam:g} (k2={k2:.3g})")

    Z = rho_bar * np.outer(sd, sd)
    Z[np.diag_indices(p)] = variances

    # lambda pseudo-observations of Z plus the centred cross-product
    numerator = lam * Z + (n - 1) * S_W
    Sigma_mean = symmetrize(numerator / (lam + n))
    Sigma_mode = symmetrize(numerator / (lam + n + 2 * p + 2))

    projected = not (is_spd(Sigma_mode) and is_spd(Sigma_mean))
    if projected:
        logger.warning("EB covariance estimate was indefinite, projecting to SPD")
        Sigma_mode = nearest_spd(Sigma_mode)
        Sigma_mean = nearest_spd(Sigma_mean)

    return EbFit(Z=Z, rho_bar=rho_bar, lambda_eb=lam, Sigma_mode=Sigma_mode,
                 Sigma_mean=Sigma_mean, spd_projected=projected, lambda_clamped=clamped, k2=k2)


def conjugate_mode_update(B, Y_star, X, prior):
    """(S0 + RSS(B)) / (nu0 + n + k + p + 1): the mode of Sigma given B"""
    nu_c, S_c = conditional_sigma_scale(B, Y_star, X, prior)
    return iw_mode(nu_c, S_c)
