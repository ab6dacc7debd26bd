#!/usr/bin/env python3
"""
Tests for PIT, coverage, pooling and marginal diagnostics
"""

import numpy as np
import pytest

from chain_state import ImputationEnsemble, ImputationMethod
from diagnostics import (
    CellDraws, central_mass, diagnose, error_metrics, marginal_gaps, overlay_frame,
    pit_consistent_coverage, pit_frame, pit_ks, pit_rank_cell, pit_values, randomized_pit,
    rubin_pool, support_violations,
)
from config import QUANTILE_METHOD
from errors import MisalignedMask, ValidationError


def make_ensemble(draws, mask, columns=None):
    draws = np.asarray(draws, dtype=float)
    columns = columns or tuple(f"y{j + 1}" for j in range(draws.shape[2]))
    return ImputationEnsemble(method=ImputationMethod.MICE, draws=draws, mask=mask,
                              elapsed_seconds=1.5, columns=columns)


@pytest.fixture
def truth_and_ensemble(rng):
    truth = rng.standard_normal((30, 3))
    mask = rng.random((30, 3)) >= 0.3
    mask[0] = False
    draws = np.repeat(truth[None], 20, axis=0)
    draws[:, ~mask] += rng.standard_normal((20, int((~mask).sum())))
    return truth, make_ensemble(draws, mask)


# ==================== PIT ====================

def test_randomized_pit_ranks():
    draws = np.array([[1.0, 2.0, 3.0, 4.0]])
    assert randomized_pit(draws, [0.0], [0.5]) == pytest.approx(0.5 / 5)
    assert randomized_pit(draws, [2.5], [0.0]) == pytest.approx(2 / 5)
    assert randomized_pit(draws, [9.0], [1.0]) == pytest.approx(5 / 5)


def test_randomized_pit_spreads_ties():
    draws = np.full((1, 4), 7.0)
    assert randomized_pit(draws, [7.0], [0.3]) == pytest.approx(0.3)
    assert pit_rank_cell(np.random.default_rng(1), CellDraws(np.full(4, 7.0), 7.0)) < 1.0


def test_cell_draws_reject_empty_or_non_finite():
    with pytest.raises(ValidationError):
        CellDraws(np.array([]), 0.0)
    with pytest.raises(ValidationError):
        CellDraws(np.array([1.0, np.nan]), 0.0)


def test_pit_is_uniform_for_exchangeable_truths(rng):
    draws = rng.standard_normal((4000, 19))
    truths = rng.standard_normal(4000)
    pits = pit_values(rng, draws, truths)
    assert np.all((pits >= 0) & (pits <= 1))
    assert pit_ks(pits) < 0.04
    assert pit_consistent_coverage(pits, 0.10) == pytest.approx(0.9, abs=0.03)
    assert central_mass(pits) == pytest.approx(0.2, abs=0.03)


def test_coverage_boundaries_are_included():
    pits = np.array([0.05, 0.5, 0.95, 0.01])
    assert pit_consistent_coverage(pits, 0.10) == 0.75
    with pytest.raises(ValidationError):
        pit_consistent_coverage(pits, 1.0)
    with pytest.raises(ValidationError):
        pit_consistent_coverage([], 0.1)


# ==================== POOLING ====================

def test_rubin_pool_closed_form():
    pooled = rubin_pool([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    assert pooled.Q_bar == 2.0
    assert pooled.B_M == 1.0
    assert pooled.T_M == pytest.approx(1.0 + 4.0 / 3.0)
    assert pooled.r == pytest.approx(4.0 / 3.0)
    assert pooled.nu_mi == pytest.approx(2 * (1 + 0.75) ** 2)
    assert pooled.missing_information == pytest.approx(4.0 / 7.0)
    assert pooled.flag is None


def test_rubin_pool_degenerate_variances():
    no_between = rubin_pool([2.0, 2.0, 2.0], [0.5, 0.5, 0.5])
    assert no_between.flag == 'zero_between_variance'
    assert no_between.r == 0.0 and np.isinf(no_between.nu_mi)

    no_within = rubin_pool([1.0, 3.0], [0.0, 0.0])
    assert no_within.flag == 'zero_within_variance'
    assert np.isinf(no_within.r)
    assert no_within.missing_information == 1.0

    with pytest.raises(ValidationError):
        rubin_pool([1.0], [1.0])
    with pytest.raises(ValidationError):
        rubin_pool([1.0, 2.0], [1.0, -1.0])


# ==================== POINT AND MARGINAL ====================

def test_error_metrics():
    rmse, mae = error_metrics([0.0, 0.0], [3.0, -4.0])
    assert rmse == pytest.approx(np.sqrt(12.5))
    assert mae == 3.5


def test_marginal_gaps_vanish_for_identical_samples(rng):
    values = rng.standard_normal(50)
    gaps = marginal_gaps(values, values, values)
    assert tuple(gaps) == (0.0, 0.0, 0.0, 0.0)
    assert gaps.mean_shrinkage == pytest.approx(1.0)


def test_marginal_gaps_quantile_convention():
    truths = np.array([0.0, 1.0, 2.0, 5.0])
    replicated = marginal_gaps(truths, np.repeat(truths, 20), truths)
    assert replicated.mean_gap == pytest.approx(0.0, abs=1e-12)
    assert replicated.sd_gap == pytest.approx(0.0, abs=1e-12)
    assert replicated.iqr_gap == pytest.approx(0.0, abs=1e-12)
    # linear interpolation at the 5% point: 0.15 for the truths, 0 for the pooled draws
    assert replicated.qq_gap > 0
    assert np.quantile(truths, 0.05, method=QUANTILE_METHOD) == pytest.approx(0.15)


def test_marginal_gaps_detect_shift_and_spread(rng):
    truths = rng.standard_normal(400)
    shifted = marginal_gaps(truths, truths + 1.0, truths)
    assert shifted.mean_gap == pytest.approx(1.0)
    assert shifted.qq_gap == pytest.approx(1.0)
    assert shifted.sd_gap == pytest.approx(0.0, abs=1e-12)
    wide = marginal_gaps(truths, 2.0 * truths, 0.5 * truths)
    assert wide.sd_gap == pytest.approx(truths.std())
    assert wide.mean_shrinkage == pytest.approx(0.5)


def test_support_violations():
    draws = np.array([[0.5, 2.0], [-1.0, 0.0]])
    bounds = np.array([[0.0, 1.0], [-2.0, 2.0]])
    assert support_violations(draws, bounds, [0, 1]) == 0.25
    assert support_violations(np.empty((0, 3)), bounds, []) == 0.0


# ==================== REPORTS ====================

def test_diagnose_reports_consistent_metrics(truth_and_ensemble):
    truth, ensemble = truth_and_ensemble
    report = diagnose(ensemble, truth, np.random.default_rng(3))
    assert report.n_cells == int((~ensemble.mask).sum())
    assert report.M == 20 and report.method == 'mice'
    assert report.cov90 == pit_consistent_coverage(report.pit_values, 0.10)
    assert report.cov95 == pit_consistent_coverage(report.pit_values, 0.05)
    assert report.cov_iqr == pit_consistent_coverage(report.pit_values, 0.5)
    assert report.metric('time') == 1.5
    assert len(report.pooled_means) == 3
    assert report.to_dict()['rmse'] == report.rmse


def test_diagnose_is_deterministic_given_stream(truth_and_ensemble):
    truth, ensemble = truth_and_ensemble
    first = diagnose(ensemble, truth, np.random.default_rng(3))
    second = diagnose(ensemble, truth, np.random.default_rng(3))
    assert first.to_dict() == second.to_dict()


def test_perfect_ensemble_scores_zero_error(rng):
    truth = rng.standard_normal((12, 2))
    mask = np.ones_like(truth, dtype=bool)
    mask[::3, 1] = False
    draws = np.repeat(truth[None], 5, axis=0)
    report = diagnose(make_ensemble(draws, mask), truth, rng)
    assert report.rmse == 0.0
    assert report.mae == 0.0


def test_diagnose_rejects_misaligned_truth(truth_and_ensemble):
    truth, ensemble = truth_and_ensemble
    with pytest.raises(MisalignedMask):
        diagnose(ensemble, truth[:, :2], np.random.default_rng(0))
    shifted = truth.copy()
    shifted[ensemble.mask] += 1.0
    with pytest.raises(MisalignedMask):
        diagnose(ensemble, shifted, np.random.default_rng(0))
    holes = truth.copy()
    holes[~ensemble.mask] = np.nan
    with pytest.raises(MisalignedMask):
        diagnose(ensemble, holes, np.random.default_rng(0))


def test_diagnose_needs_imputed_cells(rng):
    truth = rng.standard_normal((5, 2))
    complete = make_ensemble(np.repeat(truth[None], 3, axis=0), np.ones((5, 2), dtype=bool))
    with pytest.raises(MisalignedMask):
        diagnose(complete, truth, rng)


def test_export_frames(truth_and_ensemble):
    truth, ensemble = truth_and_ensemble
    report = diagnose(ensemble, truth, np.random.default_rng(3))
    pits = pit_frame(ensemble, truth, report)
    assert list(pits.columns) == ['row', 'column', 'truth', 'posterior_mean', 'pit']
    assert len(pits) == report.n_cells
    overlay = overlay_frame(ensemble, truth)
    counts = overlay['kind'].value_counts()
    assert counts['truth'] == counts['mean'] == report.n_cells
    assert counts['draw'] == report.n_cells * ensemble.M
