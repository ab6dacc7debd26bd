#!/usr/bin/env python3
"""
Tests for the reference sampler and the covariance-mode chains
"""

import dataclasses

import numpy as np
import pytest

from chain_state import ChainConfig, CovarianceBranch, CovarianceUpdate, StabilizationKind
from chains import (
    fit_shared_covariance, hima_chain, himce_branch, himce_chain, mvn_da, ridge_fill,
    scalar_bridge,
)
from conftest import correlated_block
from diagnostics import pit_consistent_coverage, pit_ks, pit_values
from errors import InvalidParameter, ValidationError
from gaussian_model import MaskedBlock, PriorSpec, draw_inverse_wishart, draw_matrix_normal

CHAINS = [mvn_da, hima_chain, himce_chain]


def batch_means_se(series, batches=40):
    """Monte Carlo standard error of a chain average, per column"""
    series = np.asarray(series, dtype=float)
    size = series.shape[0] // batches
    means = series[:size * batches].reshape(batches, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(batches)


# ==================== SHARED CONTRACTS ====================

@pytest.mark.parametrize("chain", CHAINS)
def test_observed_cells_are_never_changed(chain, block, prior, fast_cfg):
    ensemble = chain(block, prior, fast_cfg)
    assert ensemble.draws.shape == (fast_cfg.M, block.n, block.p)
    for draw in ensemble.draws:
        assert np.array_equal(draw[block.R], block.Y[block.R])
        assert np.all(np.isfinite(draw))


@pytest.mark.parametrize("chain", CHAINS)
def test_same_seed_gives_identical_ensembles(chain, block, prior, fast_cfg):
    first = chain(block, prior, fast_cfg)
    second = chain(block, prior, fast_cfg)
    assert np.array_equal(first.draws, second.draws)
    other = chain(block, prior, dataclasses.replace(fast_cfg, seed=12))
    assert not np.array_equal(first.draws, other.draws)


@pytest.mark.parametrize("chain", CHAINS)
def test_complete_block_gives_identical_copies(chain, rng, fast_cfg):
    _, Y = correlated_block(rng, n=20, p=3)
    block = MaskedBlock(Y, np.ones_like(Y, dtype=bool), np.ones((20, 1)))
    ensemble = chain(block, PriorSpec.default(3, 1), fast_cfg)
    for draw in ensemble.draws:
        assert np.array_equal(draw, Y)


@pytest.mark.parametrize("chain", [hima_chain, himce_chain])
def test_covariance_mode_chains_reject_tiny_blocks(chain, rng, fast_cfg):
    Y = rng.standard_normal((10, 1))
    block = MaskedBlock(Y, np.ones_like(Y, dtype=bool), np.ones((10, 1)))
    with pytest.raises(ValidationError):
        chain(block, PriorSpec.default(1, 1), fast_cfg)


def test_ensembles_record_method_metadata(block, prior, fast_cfg):
    ensemble = himce_chain(block, prior, fast_cfg)
    assert ensemble.method.value == 'himce'
    assert ensemble.seed == fast_cfg.seed
    assert ensemble.config['M'] == fast_cfg.M
    assert ensemble.elapsed_seconds > 0
    assert set(ensemble.stabilization_counts()) == {k.value for k in StabilizationKind}


# ==================== BUILDING BLOCKS ====================

def test_ridge_fill_keeps_observed_and_fills_missing(block, prior):
    filled = ridge_fill(block, prior)
    assert np.array_equal(filled[block.R], block.Y[block.R])
    assert np.all(np.isfinite(filled))


def test_scalar_bridge_with_unit_clamp_returns_mode(rng):
    mode = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert np.array_equal(scalar_bridge(rng, mode, 18.0, 1.0), mode)


def test_scalar_bridge_stays_within_clamp_bounds(rng):
    mode = np.array([[2.0, 0.3], [0.3, 1.0]])
    factors = np.array([scalar_bridge(rng, mode, 18.0, 1.6)[0, 0] / 2.0 for _ in range(100000)])
    assert factors.min() >= 1 / 1.6 - 1e-12
    assert factors.max() <= 1.6 + 1e-12
    unclamped = 18.0 / rng.chisquare(18.0, size=200000)
    assert unclamped.mean() == pytest.approx(18.0 / 16.0, abs=0.01)


def test_scalar_bridge_rejects_bad_parameters(rng):
    with pytest.raises(InvalidParameter):
        scalar_bridge(rng, np.eye(2), 2.0, 1.6)
    with pytest.raises(InvalidParameter):
        scalar_bridge(rng, np.eye(2), 18.0, 0.5)


def test_himce_branch_rule(fast_cfg):
    assert himce_branch(2, fast_cfg) is CovarianceBranch.EXACT_REFRESH
    assert himce_branch(3, fast_cfg) is CovarianceBranch.COVARIANCE_MODE
    assert himce_branch(10, ChainConfig()) is CovarianceBranch.EXACT_REFRESH
    assert himce_branch(40, ChainConfig()) is CovarianceBranch.COVARIANCE_MODE


def test_himce_reports_branch(block, prior, fast_cfg):
    assert himce_chain(block, prior, fast_cfg).branch is CovarianceBranch.COVARIANCE_MODE
    exact = dataclasses.replace(fast_cfg, exact_refresh_max_p=block.p)
    assert himce_chain(block, prior, exact).branch is CovarianceBranch.EXACT_REFRESH


# ==================== HIMA / HIMCE ====================

def test_hima_covariance_path_ignores_seed(block, prior, fast_cfg):
    first = hima_chain(block, prior, fast_cfg)
    second = hima_chain(block, prior, dataclasses.replace(fast_cfg, seed=99))
    assert np.array_equal(first.final_sigma, second.final_sigma)
    assert not np.array_equal(first.draws, second.draws)
    # M distinct stored datasets
    assert not np.array_equal(first.draws[0], first.draws[1])


def test_shared_fit_is_reused_by_both_chains(block, prior, fast_cfg):
    shared = fit_shared_covariance(block, prior, fast_cfg)
    hima = hima_chain(block, prior, fast_cfg, shared)
    himce = himce_chain(block, prior, fast_cfg, shared)
    assert hima.eb_fingerprint == himce.eb_fingerprint == shared.fingerprint
    again = fit_shared_covariance(block, prior, fast_cfg)
    assert again.fingerprint == shared.fingerprint


def test_shared_fit_time_is_carried_into_elapsed(block, prior, fast_cfg):
    shared = fit_shared_covariance(block, prior, fast_cfg)
    assert hima_chain(block, prior, fast_cfg, shared).elapsed_seconds >= shared.elapsed_seconds


@pytest.mark.parametrize("update", list(CovarianceUpdate))
def test_himce_covariance_updates(update, block, prior, fast_cfg):
    screen = 0 if update is CovarianceUpdate.CONJUGATE_MODE else 2
    cfg = dataclasses.replace(fast_cfg, covariance_update=update, screen_size=screen)
    ensemble = himce_chain(block, prior, cfg)
    assert np.all(np.isfinite(ensemble.draws))
    assert np.all(np.linalg.eigvalsh(ensemble.final_sigma) > 0)


def test_himce_without_bridge_is_reproducible(block, prior, fast_cfg):
    cfg = dataclasses.replace(fast_cfg, bridge=False, screen_size=3)
    assert np.array_equal(himce_chain(block, prior, cfg).draws, himce_chain(block, prior, cfg).draws)


def test_mvn_da_rejects_wide_blocks(rng, fast_cfg):
    Y = rng.standard_normal((10, 201))
    block = MaskedBlock(Y, np.ones_like(Y, dtype=bool), np.ones((10, 1)))
    with pytest.raises(ValidationError):
        mvn_da(block, PriorSpec.default(201, 1), fast_cfg)


# ==================== POSTERIOR CORRECTNESS ====================

def toy_block(seed, n=20):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    Sigma = np.array([[1.0, 0.7], [0.7, 1.0]])
    Y = X @ np.array([[0.5, -0.2], [1.0, 0.4]]) + rng.standard_normal((n, 2)) @ np.linalg.cholesky(Sigma).T
    R = rng.random((n, 2)) >= 0.3
    R[:3] = True
    return MaskedBlock(Y, R, X)


@pytest.mark.slow
def test_exact_branch_matches_reference_sampler_moments():
    block = toy_block(3)
    prior = PriorSpec.default(2, 2, alpha=1.0)
    cfg = ChainConfig(M=8000, T_burn=500, inner=1, bridge=False, screen_size=0,
                      exact_refresh_max_p=2, eps_jitter=0.0, calibrate=False, seed=1)
    reference = mvn_da(block, prior, cfg).cell_draws().T
    exact = himce_chain(block, prior, dataclasses.replace(cfg, seed=2)).cell_draws().T

    for moment in (1, 2):
        a, b = reference ** moment, exact ** moment
        se = np.sqrt(batch_means_se(a) ** 2 + batch_means_se(b) ** 2)
        assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) <= 4 * se)


@pytest.mark.slow
def test_reference_sampler_is_self_calibrated():
    rng = np.random.default_rng(2024)
    prior = PriorSpec(6.0, np.eye(2), np.zeros((1, 2)), np.eye(1))
    cfg = ChainConfig(M=20, T_burn=30, thin=2, calibrate=False)
    pits = []
    for rep in range(500):
        Sigma = draw_inverse_wishart(rng, prior.nu0, prior.S0)
        B = draw_matrix_normal(rng, prior.B0, np.eye(1), Sigma)
        X = np.ones((10, 1))
        Y = X @ B + rng.standard_normal((10, 2)) @ np.linalg.cholesky(Sigma).T
        R = rng.random((10, 2)) >= 0.3
        R[:2] = True
        if R.all():
            continue
        ensemble = mvn_da(MaskedBlock(Y, R, X), prior, dataclasses.replace(cfg, seed=rep))
        rows, cols = ensemble.missing_cells()
        pits.append(pit_values(rng, ensemble.cell_draws(), Y[rows, cols]))
    pits = np.concatenate(pits)
    assert pit_ks(pits) <= 0.04
    assert 0.86 <= pit_consistent_coverage(pits, 0.10) <= 0.94
    assert 0.46 <= pit_consistent_coverage(pits, 0.50) <= 0.54
