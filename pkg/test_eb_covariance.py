#!/usr/bin/env python3
"""
Tests for the truncated hypergeometric series, the empirical-Bayes
covariance fit and the conjugate mode update
"""

import numpy as np
import pytest
from scipy import linalg, special

from config import EB_LAMBDA_FLOOR
from eb_covariance import conjugate_mode_update, eb_covariance_fit, gauss_2f1_truncated
from errors import DegenerateColumn, InvalidC, TooFewRows, ValidationError
from gaussian_model import PriorSpec, conditional_sigma_scale, iw_mode


# ==================== HYPERGEOMETRIC SERIES ====================

def test_series_at_zero_is_one():
    assert gauss_2f1_truncated(0.5, 0.5, 3.0, 0.0) == 1.0
    assert gauss_2f1_truncated(2.0, -1.5, 7.25, 0.0, terms=1) == 1.0


def test_series_matches_log_closed_form():
    assert gauss_2f1_truncated(1.0, 1.0, 2.0, 0.5) == pytest.approx(-np.log(0.5) / 0.5, abs=1e-6)


def test_series_matches_long_reference():
    n, r = 30, 0.4
    x = 1 - r ** 2
    short = gauss_2f1_truncated(0.5, 0.5, (n - 1) / 2, x)
    assert abs(short - gauss_2f1_truncated(0.5, 0.5, (n - 1) / 2, x, terms=1000)) <= 1e-8


def test_series_accuracy_over_correlation_grid():
    grid = np.round(np.arange(-0.95, 0.951, 0.05), 2)
    for n in (10, 30, 80, 200):
        c = (n - 1) / 2
        x = 1 - grid ** 2
        short = gauss_2f1_truncated(0.5, 0.5, c, x)
        reference = gauss_2f1_truncated(0.5, 0.5, c, x, terms=1000)
        assert np.allclose(reference, special.hyp2f1(0.5, 0.5, c, x), atol=1e-8)
        # near x = 1 the 25-term series converges slowly for the smallest n
        tolerance = np.where((n >= 30) | (np.abs(grid) >= 0.4), 1e-6, 5e-5)
        assert np.all(np.abs(short - reference) <= tolerance)


def test_series_rejects_bad_arguments():
    with pytest.raises(InvalidC):
        gauss_2f1_truncated(1.0, 1.0, -2.0, 0.3, terms=10)
    with pytest.raises(ValidationError):
        gauss_2f1_truncated(1.0, 1.0, 2.0, 1.5)
    with pytest.raises(ValidationError):
        gauss_2f1_truncated(1.0, 1.0, 2.0, 0.5, terms=0)


# ==================== EB FIT ====================

def equicorrelated(rng, n, p, rho):
    Sigma = (1 - rho) * np.eye(p) + rho * np.ones((p, p))
    return rng.standard_normal((n, p)) @ np.linalg.cholesky(Sigma).T, Sigma


def test_uncorrelated_columns_clamp_lambda_to_floor():
    W = linalg.hadamard(8)[:, 1:4].astype(float)
    fit = eb_covariance_fit(W)
    S_W = np.cov(W, rowvar=False)
    assert fit.rho_bar == 0.0
    assert np.allclose(fit.Z, np.diag(np.diag(S_W)))
    # no excess correlation dispersion clamps lambda to the floor, so the
    # mode is essentially the centred scatter over n + 2p + 2
    assert fit.k2 <= 0
    assert fit.lambda_eb == EB_LAMBDA_FLOOR
    assert fit.lambda_clamped
    assert np.allclose(fit.Sigma_mode, 7 * S_W / 16, rtol=1e-6)
    assert np.allclose(fit.Sigma_mean, 7 * S_W / 8, rtol=1e-6)


def test_target_structure_and_mean_mode_order(rng):
    W, _ = equicorrelated(rng, 40, 5, 0.5)
    fit = eb_covariance_fit(W)
    S_W = np.cov(W, rowvar=False)
    sd = np.sqrt(np.diag(S_W))
    assert np.allclose(np.diag(fit.Z), np.diag(S_W))
    off = ~np.eye(5, dtype=bool)
    assert np.allclose(fit.Z[off], (fit.rho_bar * np.outer(sd, sd))[off])
    assert np.linalg.eigvalsh(fit.Sigma_mean - fit.Sigma_mode)[0] >= -1e-12
    assert np.linalg.eigvalsh(fit.Sigma_mode)[0] > 0


def test_fit_is_row_permutation_invariant(rng):
    W, _ = equicorrelated(rng, 30, 4, 0.3)
    fit = eb_covariance_fit(W)
    permuted = eb_covariance_fit(W[rng.permutation(30)])
    assert permuted.rho_bar == pytest.approx(fit.rho_bar, abs=1e-12)
    assert np.allclose(permuted.Sigma_mode, fit.Sigma_mode, atol=1e-12)


def test_fit_target_scales_with_column_rescaling(rng):
    W, _ = equicorrelated(rng, 30, 4, 0.3)
    scale = np.array([1.0, 2.0, 0.5, 3.0])
    fit = eb_covariance_fit(W)
    scaled = eb_covariance_fit(W * scale)
    assert scaled.rho_bar == pytest.approx(fit.rho_bar, abs=1e-10)
    assert np.allclose(np.diag(scaled.Z), np.diag(fit.Z) * scale ** 2)


def test_dispersed_correlations_clamp_lambda_to_floor(rng):
    a = rng.standard_normal(20)
    noise = 0.01 * rng.standard_normal((20, 3))
    W = np.column_stack([a, a, -a]) + noise
    fit = eb_covariance_fit(W)
    assert fit.lambda_eb == EB_LAMBDA_FLOOR
    assert fit.lambda_clamped


def test_fit_rejects_degenerate_input(rng):
    with pytest.raises(TooFewRows):
        eb_covariance_fit(rng.standard_normal((3, 2)))
    W = rng.standard_normal((10, 3))
    W[:, 1] = 4.0
    with pytest.raises(DegenerateColumn):
        eb_covariance_fit(W)
    with pytest.raises(ValidationError):
        eb_covariance_fit(rng.standard_normal((10, 1)))


def test_fingerprint_is_deterministic(rng):
    W, _ = equicorrelated(rng, 20, 3, 0.4)
    assert eb_covariance_fit(W).fingerprint() == eb_covariance_fit(W.copy()).fingerprint()
    assert eb_covariance_fit(W).fingerprint() != eb_covariance_fit(W + 0.1 * W ** 2).fingerprint()


def test_mode_recovers_equicorrelation_better_than_sample_covariance():
    rng = np.random.default_rng(41)
    rho_bars, mode_err, sample_err = [], [], []
    for _ in range(200):
        W, Sigma = equicorrelated(rng, 40, 5, 0.6)
        fit = eb_covariance_fit(W)
        centred = W - W.mean(axis=0)
        rho_bars.append(fit.rho_bar)
        mode_err.append(np.linalg.norm(fit.Sigma_mode - Sigma))
        sample_err.append(np.linalg.norm(centred.T @ centred / 40 - Sigma))
    assert abs(np.mean(rho_bars) - 0.6) <= 0.1
    assert np.mean(mode_err) < np.mean(sample_err)


# ==================== CONJUGATE MODE ====================

def test_conjugate_mode_identities(rng):
    prior = PriorSpec.default(3, 2, alpha=1.0)
    X = rng.standard_normal((12, 2))
    zero_resid = conjugate_mode_update(prior.B0, X @ prior.B0, X, prior)
    assert np.allclose(zero_resid, prior.S0 / (prior.nu0 + 12 + 2 + 3 + 1))

    B = rng.standard_normal((2, 3))
    Y = rng.standard_normal((12, 3))
    nu_c, S_c = conditional_sigma_scale(B, Y, X, prior)
    assert np.array_equal(conjugate_mode_update(B, Y, X, prior), iw_mode(nu_c, S_c))


def test_conjugate_mode_iteration_reaches_fixed_point(rng):
    prior = PriorSpec.default(2, 1, alpha=1.0)
    X = np.ones((15, 1))
    Y = rng.standard_normal((15, 2))
    B = np.zeros((1, 2))
    previous = None
    for _ in range(50):
        Sigma = conjugate_mode_update(B, Y, X, prior)
        B = np.linalg.solve(X.T @ X + prior.V0_inv, X.T @ Y)
        if previous is not None and np.linalg.norm(Sigma - previous) <= 1e-8:
            break
        previous = Sigma
    else:
        pytest.fail("mode iteration did not settle within 50 iterations")
