#!/usr/bin/env python3
"""
Pseudo-missing benchmark harness

Simulates a spatially correlated block (or reads a low-dimensional CSV),
masks it completely at random, runs HIMA, HIMCE and MICE on identical
inputs, scores every ensemble against the withheld truths and aggregates
mean (sd) per metric across replicates.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from config import (
    BENCHMARK_METRICS, LOWDIM_MIN_COMPLETE_ROWS, MASK_MAX_ATTEMPTS, MIN_OBSERVED_PER_COLUMN,
    NUGGET_FLOOR_FRACTION,
)
from calibration import himce_with_calibration
from chain_state import ChainConfig, ImputationMethod
from chains import fit_shared_covariance
from diagnostics import diagnose, overlay_frame, pit_frame, pool_column_means
from ensemble_store import EnsembleStore, read_matrix_csv, resource_usage, write_matrix_csv
from errors import (
    ConfigError, CovmodeError, DegenerateColumn, MaskingFailed, NumericalError,
    TooFewCompleteRows, ValidationError,
)
from gaussian_model import MaskedBlock, PriorSpec, default_column_names
from mice_fcs import FcsConfig, mice_impute
from spd_linalg import cholesky

logger = logging.getLogger(__name__)

METHOD_ORDER = (ImputationMethod.HIMA, ImputationMethod.HIMCE, ImputationMethod.MICE)
LOWDIM_FIXTURE_COLUMNS = ('age', 'bmi', 'chl')


@dataclass
class SpatialSimConfig:
    n: int = 80
    grid: Tuple[int, int] = (8, 8)
    p: int = 40
    kernel_scale: float = 2.0
    kernel_var: float = 1.0
    nugget: float = 0.1
    strong_slope: float = 0.8
    weak_slope: float = 0.2
    strong_slope_cols: int = 10
    mask_rate: float = 0.3
    replicates: int = 10
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))

    def validate(self):
        errors = []
        if len(self.grid) != 2 or min(self.grid) < 1:
            errors.append("grid must hold two positive side lengths")
        elif not 2 <= self.p <= self.grid[0] * self.grid[1]:
            errors.append(f"p must lie in [2, {self.grid[0] * self.grid[1]}] for grid {self.grid}")
        if self.n < 2:
            errors.append("n must be at least 2")
        if not 0 < self.mask_rate < 1:
            errors.append("mask_rate must lie strictly between 0 and 1")
        if self.kernel_scale <= 0:
            errors.append("kernel_scale must be positive")
        if self.kernel_var <= 0:
            errors.append("kernel_var must be positive")
        if self.nugget < 0:
            errors.append("nugget must be non-negative")
        if self.strong_slope_cols < 0:
            errors.append("strong_slope_cols must be non-negative")
        if self.replicates < 1:
            errors.append("replicates must be at least 1")
        return errors


@dataclass
class BenchmarkRow:
    """Mean and sd (n - 1 divisor) of every metric across replicates for one method"""
    method: str
    mean: Dict[str, float]
    sd: Dict[str, float]
    replicates: int

    def formatted(self, metric):
        return f"{self.mean[metric]:.4f} ({self.sd[metric]:.4f})"


@dataclass
class ReplicateTask:
    index: int
    seed: int
    mask_rate: float
    chain_cfg: ChainConfig
    fcs_cfg: FcsConfig
    prior_kwargs: dict = field(default_factory=dict)
    sim_cfg: Optional[SpatialSimConfig] = None
    Y: Optional[np.ndarray] = None
    X: Optional[np.ndarray] = None
    columns: Tuple[str, ...] = ()
    keep_ensembles: bool = False


@dataclass
class ReplicateResult:
    index: int
    rows: list
    truth: np.ndarray
    ensembles: Optional[dict] = None
    reports: Optional[dict] = None


# ==================== DATA GENERATION ====================

def standardize_columns(values):
    """Centre and scale columns to mean 0, sd 1 (n - 1 divisor)"""
    values = np.asarray(values, dtype=float)
    sd = values.std(axis=0, ddof=1)
    flat = np.flatnonzero(~(sd > 0))
    if flat.size:
        raise DegenerateColumn(f"cannot standardize constant columns {flat.tolist()}")
    return (values - values.mean(axis=0)) / sd


def lattice_covariance(cfg):
    """Exponential kernel on the lattice plus a nugget floored at 1e-6 * kernel_var"""
    rows, cols = np.indices(cfg.grid)
    sites = np.column_stack([rows.ravel(), cols.ravel()]).astype(float)
    nugget = max(cfg.nugget, NUGGET_FLOOR_FRACTION * cfg.kernel_var)
    distance = cdist(sites, sites)
    return cfg.kernel_var * np.exp(-distance / cfg.kernel_scale) + nugget * np.eye(len(sites))


def simulate_spatial(cfg, rng):
    """
    Draw one standardized spatial block and its design

    Every lattice site is generated; the first strong_slope_cols sites carry
    the strong age slope. The p sites with the largest generated variance
    are kept in lattice order and standardized.

    Returns:
        tuple: (Y n x p, X n x 2 with intercept and standardized age)
    """
    Sigma = lattice_covariance(cfg)
    sites = Sigma.shape[0]
    age = standardize_columns(rng.uniform(size=(cfg.n, 1)))
    X = np.column_stack([np.ones(cfg.n), age])

    B = np.zeros((2, sites))
    B[1] = cfg.weak_slope
    B[1, :cfg.strong_slope_cols] = cfg.strong_slope
    noise = rng.standard_normal((cfg.n, sites)) @ cholesky(Sigma).lower.T
    Y = X @ B + noise

    if cfg.p < sites:
        order = np.argsort(-Y.var(axis=0, ddof=1), kind='stable')
        Y = Y[:, np.sort(order[:cfg.p])]
    return standardize_columns(Y), X


def mask_mcar(rng, Y, rate, X, columns=()):
    """
    Mask cells independently with probability `rate`

    Columns left with fewer than 2 observed cells are redrawn.

    Returns:
        tuple: (MaskedBlock, withheld truths in row-major cell order)

    Raises:
        MaskingFailed: when a valid mask is not found within 100 attempts
    """
    if not 0 < rate < 1:
        raise ValidationError(f"mask rate must lie strictly between 0 and 1, got {rate}")
    Y = np.asarray(Y, dtype=float)
    n, p = Y.shape
    R = rng.random((n, p)) >= rate
    for _ in range(MASK_MAX_ATTEMPTS):
        short = np.flatnonzero(R.sum(axis=0) < MIN_OBSERVED_PER_COLUMN)
        if short.size == 0:
            break
        R[:, short] = rng.random((n, short.size)) >= rate
    else:
        raise MaskingFailed(f"no mask with {MIN_OBSERVED_PER_COLUMN} observed cells per column "
                            f"after {MASK_MAX_ATTEMPTS} attempts")
    return MaskedBlock(Y, R, X, columns), Y[~R]


def write_lowdim_fixture(path, seed=0):
    """
    Write a 13-row synthetic age / bmi / chl CSV standing in for the public
    low-dimensional extract

    Returns:
        Path: the written file
    """
    cfg = SpatialSimConfig(n=13, grid=(1, 2), p=2, kernel_scale=2.0, nugget=0.1,
                           strong_slope_cols=1, replicates=1, seed=seed)
    Y, X = simulate_spatial(cfg, np.random.default_rng(seed))
    frame = pd.DataFrame({
        'age': 40.0 + 12.0 * X[:, 1],
        'bmi': 26.5 + 4.0 * Y[:, 0],
        'chl': 190.0 + 45.0 * Y[:, 1],
    })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.17g')
    logger.info(f"Wrote low-dimensional fixture to {path}")
    return path


def load_lowdim(data_path, targets, design):
    """
    Complete rows of the named target and design columns, standardized

    Returns:
        tuple: (Y, X with intercept, target names)
    """
    values, _ = read_matrix_csv(data_path, list(targets) + list(design))
    complete = np.all(np.isfinite(values), axis=1)
    if complete.sum() < LOWDIM_MIN_COMPLETE_ROWS:
        raise TooFewCompleteRows(f"{data_path} has {int(complete.sum())} complete rows, "
                                 f"need {LOWDIM_MIN_COMPLETE_ROWS}")
    values = values[complete]
    Y = standardize_columns(values[:, :len(targets)])
    D = standardize_columns(values[:, len(targets):]) if design else np.empty((len(values), 0))
    logger.info(f"Low-dimensional benchmark on {len(values)} complete rows")
    return Y, np.column_stack([np.ones(len(values)), D]), tuple(targets)


# ==================== REPLICATES ====================

def _stream_seed(seed_seq):
    return int(seed_seq.generate_state(1)[0])


def run_replicate(task):
    """
    One pseudo-missing replicate: (simulate), mask, impute three ways, score

    Module-level so process pools can pickle it.
    """
    usage_start = resource_usage()
    sim_ss, mask_ss, chain_ss, diag_ss = np.random.SeedSequence([task.seed, task.index]).spawn(4)
    if task.Y is None:
        Y, X = simulate_spatial(task.sim_cfg, np.random.default_rng(sim_ss))
        columns = default_column_names(Y.shape[1])
    else:
        Y, X, columns = task.Y, task.X, task.columns
    block, _ = mask_mcar(np.random.default_rng(mask_ss), Y, task.mask_rate, X, columns)

    chain_seed = _stream_seed(chain_ss)
    cfg = replace(task.chain_cfg, seed=chain_seed)
    fcs_cfg = replace(task.fcs_cfg, seed=chain_seed, workers=1)
    prior = PriorSpec.default(block.p, block.k, alpha=cfg.alpha_ridge, **task.prior_kwargs)

    shared = fit_shared_covariance(block, prior, cfg)
    himce, hima = himce_with_calibration(block, prior, cfg, shared=shared)
    mice = mice_impute(block, fcs_cfg)
    ensembles = {e.method: e for e in (hima, himce, mice)}

    diag_rng = np.random.default_rng(diag_ss)
    reports, rows = {}, []
    for method in METHOD_ORDER:
        ensemble = ensembles[method]
        report = diagnose(ensemble, Y, diag_rng)
        pooled = pool_column_means(ensemble.draws)
        missing_info = float(np.mean([estimate.missing_information for estimate in pooled]))
        reports[method] = report
        rows.append({
            'replicate': task.index,
            'method': method.value,
            **{metric: report.metric(metric) for metric in BENCHMARK_METRICS},
            'support_violation_rate': report.support_violation_rate,
            'calibration_seconds': ensemble.calibration_seconds,
            'missing_information': missing_info,
            **ensemble.stabilization_counts(),
        })
        logger.info(f"Replicate {task.index} {method.value}: rmse={report.rmse:.4f} "
                    f"cov95={report.cov95:.4f} missing_info={missing_info:.3f}")

    usage = resource_usage()
    for row in rows:
        row['peak_rss_mb'] = usage['peak_rss_mb']
        row['cpu_seconds'] = usage['cpu_seconds'] - usage_start['cpu_seconds']

    if not task.keep_ensembles:
        return ReplicateResult(task.index, rows, Y)
    return ReplicateResult(task.index, rows, Y, ensembles=ensembles, reports=reports)


def run_replicates(tasks, workers=1, allow_skip=False):
    """
    Run replicate tasks in order, optionally on a process pool

    A failing replicate fails the run unless allow_skip is set.

    Returns:
        list: ReplicateResult per successful replicate, in index order
    """
    start = time.perf_counter()
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_replicate, task) for task in tasks]
            for task, future in zip(tasks, futures):
                results.append(_collect(task, future.result, allow_skip))
    else:
        for task in tasks:
            results.append(_collect(task, lambda: run_replicate(task), allow_skip))

    results = [r for r in results if r is not None]
    if len(results) < 2:
        raise NumericalError(f"only {len(results)} of {len(tasks)} replicates succeeded")
    logger.info(f"{len(results)} replicates finished in {time.perf_counter() - start:.1f}s")
    return results


def _collect(task, outcome, allow_skip):
    try:
        return outcome()
    except CovmodeError as e:
        if not allow_skip:
            raise
        logger.warning(f"Skipping replicate {task.index}: {e}")
        return None


# ==================== AGGREGATION AND OUTPUT ====================

def replicate_frame(results):
    return pd.DataFrame([row for result in results for row in result.rows])


def aggregate(frame):
    """
    Mean and sd per method and metric

    Returns:
        list: BenchmarkRow per method, in HIMA, HIMCE, MICE order
    """
    rows = []
    grouped = frame.groupby('method', sort=False)
    for method in METHOD_ORDER:
        if method.value not in grouped.groups:
            continue
        group = grouped.get_group(method.value)[list(BENCHMARK_METRICS)]
        rows.append(BenchmarkRow(
            method=method.value,
            mean=group.mean().to_dict(),
            sd=group.std(ddof=1).fillna(0.0).to_dict(),
            replicates=len(group),
        ))
    return rows


def summary_frame(rows):
    return pd.DataFrame([
        {'method': row.method, **{metric: row.formatted(metric) for metric in BENCHMARK_METRICS}}
        for row in rows
    ])


def summary_stats_frame(rows):
    return pd.DataFrame([
        {'method': row.method, 'metric': metric, 'mean': row.mean[metric],
         'sd': row.sd[metric], 'replicates': row.replicates}
        for row in rows for metric in BENCHMARK_METRICS
    ])


def write_benchmark_outputs(out_dir, results):
    """
    Write summary tables, per-replicate metrics and replicate-0 exports

    Returns:
        list: BenchmarkRow per method
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = replicate_frame(results)
    rows = aggregate(frame)

    summary_frame(rows).to_csv(out_dir / "summary.csv", index=False)
    summary_stats_frame(rows).to_csv(out_dir / "summary_stats.csv", index=False,
                                     float_format='%.17g')
    frame.to_csv(out_dir / "replicates.csv", index=False, float_format='%.17g')

    first = results[0]
    if first.ensembles:
        pit_parts, overlay_parts = [], []
        for method in METHOD_ORDER:
            ensemble = first.ensembles[method]
            report = first.reports[method]
            pit_parts.append(pit_frame(ensemble, first.truth, report).assign(method=method.value))
            overlay_parts.append(overlay_frame(ensemble, first.truth).assign(method=method.value))
            EnsembleStore(out_dir / "ensembles" / method.value).save(
                ensemble, extra={'replicate': first.index})
        pd.concat(pit_parts, ignore_index=True).to_csv(out_dir / "pit_export.csv", index=False,
                                                       float_format='%.17g')
        pd.concat(overlay_parts, ignore_index=True).to_csv(out_dir / "overlay_export.csv",
                                                           index=False, float_format='%.17g')
        write_matrix_csv(out_dir / "truth_replicate_0.csv", first.truth,
                         first.ensembles[METHOD_ORDER[0]].columns)
    logger.info(f"Benchmark outputs written to {out_dir}")
    return rows


def _check_replicates(replicates):
    if replicates < 2:
        raise ValidationError(f"a benchmark needs at least 2 replicates, got {replicates}")


def run_spatial_benchmark(sim_cfg, chain_cfg, fcs_cfg, prior_kwargs=None, workers=1,
                          allow_skip=False, out_dir=None):
    """
    Repeated spatial pseudo-missing benchmark

    Args:
        sim_cfg (SpatialSimConfig): simulation, mask rate, replicates and seed
        chain_cfg (ChainConfig): HIMA / HIMCE settings (seed is derived per replicate)
        fcs_cfg (FcsConfig): MICE settings (seed is derived per replicate)
        prior_kwargs (dict): nu0_offset / s0_scale for PriorSpec.default
        workers (int): replicate-level processes
        allow_skip (bool): skip failing replicates instead of failing the run
        out_dir (Path): optional output directory

    Returns:
        tuple: (BenchmarkRow list, per-replicate DataFrame)
    """
    _check_replicates(sim_cfg.replicates)
    logger.info(f"Spatial benchmark: n={sim_cfg.n} p={sim_cfg.p} mask_rate={sim_cfg.mask_rate} "
                f"replicates={sim_cfg.replicates} seed={sim_cfg.seed}")
    tasks = [
        ReplicateTask(index=r, seed=sim_cfg.seed, mask_rate=sim_cfg.mask_rate, chain_cfg=chain_cfg,
                      fcs_cfg=fcs_cfg, prior_kwargs=prior_kwargs or {}, sim_cfg=sim_cfg,
                      keep_ensembles=(r == 0 and out_dir is not None))
        for r in range(sim_cfg.replicates)
    ]
    results = run_replicates(tasks, workers, allow_skip)
    if out_dir is not None:
        rows = write_benchmark_outputs(out_dir, results)
    else:
        rows = aggregate(replicate_frame(results))
    return rows, replicate_frame(results)


def run_lowdim_benchmark(data_path, targets, design, mask_rate, replicates, chain_cfg, fcs_cfg,
                         seed=0, prior_kwargs=None, workers=1, allow_skip=False, out_dir=None):
    """
    Repeated pseudo-missing benchmark on the complete rows of a small CSV

    Returns:
        tuple: (BenchmarkRow list, per-replicate DataFrame)
    """
    _check_replicates(replicates)
    Y, X, columns = load_lowdim(data_path, targets, design)
    tasks = [
        ReplicateTask(index=r, seed=seed, mask_rate=mask_rate, chain_cfg=chain_cfg,
                      fcs_cfg=fcs_cfg, prior_kwargs=prior_kwargs or {}, Y=Y, X=X,
                      columns=columns, keep_ensembles=(r == 0 and out_dir is not None))
        for r in range(replicates)
    ]
    results = run_replicates(tasks, workers, allow_skip)
    if out_dir is not None:
        rows = write_benchmark_outputs(out_dir, results)
    else:
        rows = aggregate(replicate_frame(results))
    return rows, replicate_frame(results)
