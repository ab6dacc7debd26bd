#!/usr/bin/env python3
"""
Evaluation of imputation ensembles against withheld truths

Every calibration summary (PIT moments, KS distance, central mass and
interval coverages) is computed from the same randomized rank-cell PIT
values, so coverage is by construction the PIT mass in a central band.
"""

import logging
from dataclasses import dataclass, asdict, field
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy import stats

from config import CENTRAL_BAND, QQ_GRID, QUANTILE_METHOD
from errors import MisalignedMask, ValidationError

logger = logging.getLogger(__name__)


# ==================== TYPES ====================

@dataclass(frozen=True, eq=False)
class CellDraws:
    draws: np.ndarray
    truth: float

    def __post_init__(self):
        draws = np.asarray(self.draws, dtype=float).reshape(-1)
        if draws.size < 1 or not np.all(np.isfinite(draws)):
            raise ValidationError("a cell needs at least one finite draw")
        object.__setattr__(self, 'draws', draws)
        object.__setattr__(self, 'truth', float(self.truth))


@dataclass
class PooledEstimate:
    Q_bar: float
    U_bar: float
    B_M: float
    T_M: float
    r: float
    nu_mi: float
    flag: Optional[str] = None

    @property
    def missing_information(self):
        """Approximate fraction of missing information r / (1 + r)"""
        if np.isinf(self.r):
            return 1.0
        return self.r / (1.0 + self.r)


@dataclass
class MarginalGaps:
    mean_gap: float
    sd_gap: float
    iqr_gap: float
    qq_gap: float
    mean_shrinkage: float = float('nan')

    def __iter__(self):
        return iter((self.mean_gap, self.sd_gap, self.iqr_gap, self.qq_gap))


@dataclass
class DiagnosticsReport:
    rmse: float
    mae: float
    pit_values: List[float]
    pit_mean: float
    pit_sd: float
    pit_ks: float
    p_central: float
    cov_iqr: float
    cov90: float
    cov95: float
    mean_gap: float
    sd_gap: float
    iqr_gap: float
    qq_gap: float
    support_violation_rate: float
    elapsed_seconds: float
    method: str = ""
    n_cells: int = 0
    M: int = 0
    mean_shrinkage: float = float('nan')
    pooled_means: List[dict] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def metric(self, name):
        if name == 'time':
            return self.elapsed_seconds
        return getattr(self, name)


# ==================== POOLING ====================

def rubin_pool(estimates, variances):
    """
    Combine per-imputation estimates and variances

    Returns:
        PooledEstimate: flag is 'zero_between_variance' when B_M = 0 and
        'zero_within_variance' when U_bar = 0 < B_M; nu_mi is +inf in both
    """
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    M = q.size
    if M < 2 or u.size != M:
        raise ValidationError("pooling needs at least 2 estimates with matching variances")
    if np.any(u < 0):
        raise ValidationError("within-imputation variances must be non-negative")

    Q_bar = float(q.mean())
    U_bar = float(u.mean())
    B_M = float(q.var(ddof=1))
    inflation = (1.0 + 1.0 / M) * B_M
    T_M = U_bar + inflation

    if B_M == 0:
        return PooledEstimate(Q_bar, U_bar, B_M, T_M, 0.0, float('inf'), 'zero_between_variance')
    if U_bar == 0:
        logger.warning("Rubin pooling with zero within-imputation variance")
        return PooledEstimate(Q_bar, U_bar, B_M, T_M, float('inf'), float('inf'),
                              'zero_within_variance')
    r = inflation / U_bar
    nu_mi = (M - 1) * (1.0 + 1.0 / r) ** 2
    return PooledEstimate(Q_bar, U_bar, B_M, T_M, r, nu_mi)


def pool_column_means(draws):
    """Pool each column mean across completed datasets (estimate variance s^2 / n)"""
    draws = np.asarray(draws, dtype=float)
    n = draws.shape[1]
    pooled = []
    for j in range(draws.shape[2]):
        estimates = draws[:, :, j].mean(axis=1)
        variances = draws[:, :, j].var(axis=1, ddof=1) / n
        pooled.append(rubin_pool(estimates, variances))
    return pooled


# ==================== PIT AND COVERAGE ====================

def randomized_pit(draws, truths, uniforms):
    """(r_below + U (r_tied + 1)) / (M + 1) for each row of an L x M draw matrix"""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    truths = np.asarray(truths, dtype=float).reshape(-1, 1)
    below = (draws < truths).sum(axis=1)
    tied = (draws == truths).sum(axis=1)
    return (below + np.asarray(uniforms, dtype=float) * (tied + 1)) / (draws.shape[1] + 1)


def pit_values(rng, draws, truths):
    """Randomized PIT for L cells, one uniform per cell in cell order"""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    return randomized_pit(draws, truths, rng.random(draws.shape[0]))


def pit_rank_cell(rng, cell):
    return float(randomized_pit(cell.draws[None, :], [cell.truth], [rng.random()])[0])


def pit_consistent_coverage(pits, alpha):
    """Fraction of PIT values in [alpha/2, 1 - alpha/2], boundaries included"""
    if not 0 < alpha < 1:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    pits = np.asarray(pits, dtype=float)
    if pits.size < 1:
        raise ValidationError("coverage needs at least one PIT value")
    inside = (pits >= alpha / 2.0) & (pits <= 1.0 - alpha / 2.0)
    return float(inside.mean())


def central_mass(pits):
    pits = np.asarray(pits, dtype=float)
    low, high = CENTRAL_BAND
    return float(((pits >= low) & (pits <= high)).mean())


def pit_ks(pits):
    """One-sample sup distance between the PIT empirical CDF and Uniform(0, 1)"""
    return float(stats.kstest(np.asarray(pits, dtype=float), 'uniform').statistic)


# ==================== POINT AND MARGINAL SUMMARIES ====================

def error_metrics(truths, posterior_means):
    resid = np.asarray(posterior_means, dtype=float) - np.asarray(truths, dtype=float)
    if resid.size < 1:
        raise ValidationError("error metrics need at least one cell")
    return float(np.sqrt(np.mean(resid ** 2))), float(np.mean(np.abs(resid)))


def _iqr(values):
    q1, q3 = np.quantile(values, [0.25, 0.75], method=QUANTILE_METHOD)
    return q3 - q1


def marginal_gaps(truths, pooled_draws, posterior_means):
    """
    Distributional gaps between pooled predictive draws and withheld truths

    sd uses the population (ddof=0) convention, so mean_gap and sd_gap are
    unchanged when a sample is replicated. Quantiles on QQ_GRID use numpy's
    "linear" rule (interpolating between order statistics at (n-1)q) for
    both samples. That rule is not replication invariant: pooled draws that
    repeat the truths M times typically still give qq_gap > 0.
    mean_shrinkage is sd(posterior means) / sd(truths).
    """
    truths = np.asarray(truths, dtype=float).reshape(-1)
    pooled = np.asarray(pooled_draws, dtype=float).reshape(-1)
    means = np.asarray(posterior_means, dtype=float).reshape(-1)
    if truths.size < 2:
        raise ValidationError("marginal gaps need at least 2 cells")

    grid = np.asarray(QQ_GRID)
    qq = np.abs(np.quantile(pooled, grid, method=QUANTILE_METHOD)
                - np.quantile(truths, grid, method=QUANTILE_METHOD))
    truth_sd = truths.std()
    return MarginalGaps(
        mean_gap=float(abs(pooled.mean() - truths.mean())),
        sd_gap=float(abs(pooled.std() - truth_sd)),
        iqr_gap=float(abs(_iqr(pooled) - _iqr(truths))),
        qq_gap=float(qq.mean()),
        mean_shrinkage=float(means.std() / truth_sd) if truth_sd > 0 else float('nan'),
    )


def observed_bounds(values, mask):
    """Per-column (min, max) over observed cells"""
    data = np.where(np.asarray(mask, dtype=bool), np.asarray(values, dtype=float), np.nan)
    return np.column_stack([np.nanmin(data, axis=0), np.nanmax(data, axis=0)])


def support_violations(draws, bounds, columns):
    """
    Fraction of imputed values outside their column's admissible interval

    Args:
        draws (ndarray): L x M draws of the imputed cells
        bounds (ndarray): p x 2 (low, high) per column
        columns (ndarray): column index of each of the L cells
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    bounds = np.asarray(bounds, dtype=float)
    columns = np.asarray(columns, dtype=int)
    if draws.size == 0:
        return 0.0
    low = bounds[columns, 0][:, None]
    high = bounds[columns, 1][:, None]
    return float(((draws < low) | (draws > high)).mean())


# ==================== REPORTS ====================

def _withheld_truths(ensemble, truth):
    truth = np.asarray(truth, dtype=float)
    if truth.shape != ensemble.mask.shape:
        raise MisalignedMask(f"truth shape {truth.shape} does not match ensemble {ensemble.mask.shape}")
    rows, cols = ensemble.missing_cells()
    if rows.size == 0:
        raise MisalignedMask("the ensemble has no imputed cells to diagnose")
    values = truth[rows, cols]
    if not np.all(np.isfinite(values)):
        raise MisalignedMask("truth is missing for some imputed cells")
    observed = ensemble.draws[0][ensemble.mask]
    if not np.allclose(observed, truth[ensemble.mask], equal_nan=False):
        raise MisalignedMask("observed cells of the ensemble disagree with the truth file")
    return rows, cols, values


def diagnose(ensemble, truth, rng, bounds=None):
    """
    Score an ensemble on its imputed cells

    Args:
        ensemble (ImputationEnsemble): completed datasets
        truth (ndarray): n x p matrix holding the withheld values
        rng (Generator): dedicated diagnostics stream for PIT randomization
        bounds (ndarray): optional p x 2 admissible intervals

    Returns:
        DiagnosticsReport: all calibration and accuracy summaries
    """
    rows, cols, truths = _withheld_truths(ensemble, truth)
    cell_draws = ensemble.cell_draws()
    means = cell_draws.mean(axis=1)

    rmse, mae = error_metrics(truths, means)
    pits = pit_values(rng, cell_draws, truths)
    gaps = marginal_gaps(truths, cell_draws, means)
    if bounds is None:
        bounds = observed_bounds(ensemble.draws[0], ensemble.mask)

    pooled = pool_column_means(ensemble.draws)
    return DiagnosticsReport(
        rmse=rmse, mae=mae, pit_values=pits.tolist(),
        pit_mean=float(pits.mean()), pit_sd=float(pits.std()), pit_ks=pit_ks(pits),
        p_central=central_mass(pits),
        cov_iqr=pit_consistent_coverage(pits, 0.5),
        cov90=pit_consistent_coverage(pits, 0.10),
        cov95=pit_consistent_coverage(pits, 0.05),
        mean_gap=gaps.mean_gap, sd_gap=gaps.sd_gap, iqr_gap=gaps.iqr_gap, qq_gap=gaps.qq_gap,
        support_violation_rate=support_violations(cell_draws, bounds, cols),
        elapsed_seconds=float(ensemble.elapsed_seconds),
        method=ensemble.method.value, n_cells=int(rows.size), M=ensemble.M,
        mean_shrinkage=gaps.mean_shrinkage,
        pooled_means=[
            {'column': name, **asdict(estimate)}
            for name, estimate in zip(ensemble.columns, pooled)
        ],
    )


def pit_frame(ensemble, truth, report):
    """Per-cell PIT export aligned with the report's PIT values"""
    rows, cols, truths = _withheld_truths(ensemble, truth)
    names = np.asarray(ensemble.columns, dtype=object)
    return pd.DataFrame({
        'row': rows,
        'column': names[cols],
        'truth': truths,
        'posterior_mean': ensemble.cell_draws().mean(axis=1),
        'pit': report.pit_values,
    })


def overlay_frame(ensemble, truth):
    """Long-format truth / pooled draw / posterior mean samples per column"""
    rows, cols, truths = _withheld_truths(ensemble, truth)
    names = np.asarray(ensemble.columns, dtype=object)
    cell_draws = ensemble.cell_draws()
    parts = [
        pd.DataFrame({'kind': 'truth', 'column': names[cols], 'value': truths}),
        pd.DataFrame({'kind': 'draw', 'column': np.repeat(names[cols], ensemble.M),
                      'value': cell_draws.reshape(-1)}),
        pd.DataFrame({'kind': 'mean', 'column': names[cols], 'value': cell_draws.mean(axis=1)}),
    ]
    return pd.concat(parts, ignore_index=True)
