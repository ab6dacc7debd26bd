#!/usr/bin/env python3
"""
Screened Gaussian fully conditional specification (MICE) comparator

Each column with missing cells is regressed on the design X plus its most
correlated block columns by Bayesian linear regression (flat prior on the
coefficients, Jeffreys prior on the variance), and its missing cells are
drawn from the posterior predictive.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np
from scipy import linalg

from config import FCS_PIVOT_TOL, FCS_RIDGE_FALLBACK, MIN_OBSERVED_PER_COLUMN
from chain_state import ImputationEnsemble, ImputationMethod
from errors import AllMissingColumn, ConfigError
from gaussian_model import screen_columns
from spd_linalg import cholesky

logger = logging.getLogger(__name__)


@dataclass
class FcsConfig:
    M: int = 20
    iters: int = 10
    max_screen: int = 20
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        errors = []
        if self.M < 2:
            errors.append("M must be at least 2")
        if self.iters < 1:
            errors.append("iters must be at least 1")
        if self.max_screen < 0:
            errors.append("max_screen must be non-negative")
        if self.workers < 1:
            errors.append("workers must be at least 1")
        if errors:
            raise ConfigError("; ".join(errors))

    def to_dict(self):
        return asdict(self)


def _keep_screened(X_obs, S_obs, max_keep):
    """Indices of screened predictors that stay linearly independent of X and each other"""
    if S_obs.shape[1] == 0 or max_keep <= 0:
        return np.empty(0, dtype=int)
    Q_x, _ = np.linalg.qr(X_obs)
    residual = S_obs - Q_x @ (Q_x.T @ S_obs)
    _, R_s, pivots = linalg.qr(residual, mode='economic', pivoting=True)
    scale = max(1.0, float(np.max(np.linalg.norm(S_obs, axis=0))))
    rank = int(np.sum(np.abs(np.diag(R_s)) > FCS_PIVOT_TOL * scale))
    return np.sort(pivots[:min(rank, max_keep)])


def _ridge_draw(rng, design, y):
    q = design.shape[1]
    factor = cholesky(design.T @ design + FCS_RIDGE_FALLBACK * np.eye(q))
    coef = factor.solve(design.T @ y)
    rss = max(float(np.sum((y - design @ coef) ** 2)), 1e-12)
    df = max(y.size - q, 1)
    sigma = np.sqrt(rss / rng.chisquare(df))
    noise = linalg.solve_triangular(factor.lower, rng.standard_normal(q), lower=True, trans='T')
    return coef + sigma * noise, sigma


def bayesian_regression_draw(rng, design, y):
    """
    Draw (coefficients, sigma) from the flat / Jeffreys posterior

    sigma^2 ~ RSS / chi2_{n-q}, coefficients ~ N(beta_hat, sigma^2 (D'D)^{-1});
    falls back to a tiny ridge when D'D is singular or no residual df remain.
    """
    n, q = design.shape
    if n - q < 1:
        return _ridge_draw(rng, design, y)
    Q, R = np.linalg.qr(design)
    diag = np.abs(np.diag(R))
    if diag.min() <= FCS_PIVOT_TOL * max(1.0, diag.max()):
        return _ridge_draw(rng, design, y)

    coef = linalg.solve_triangular(R, Q.T @ y)
    rss = max(float(np.sum((y - design @ coef) ** 2)), 1e-12)
    sigma = np.sqrt(rss / rng.chisquare(n - q))
    noise = linalg.solve_triangular(R, rng.standard_normal(q))
    return coef + sigma * noise, sigma


def completed_screens(Y, max_screen):
    """Screen predictors by |Pearson correlation| on the current completed block"""
    p = Y.shape[1]
    if max_screen <= 0 or p < 2:
        return [np.empty(0, dtype=int) for _ in range(p)]
    with np.errstate(invalid='ignore', divide='ignore'):
        corr = np.atleast_2d(np.corrcoef(Y, rowvar=False))
    return screen_columns(np.nan_to_num(corr, nan=0.0), max_screen)


def _impute_once(block, cfg, rng):
    Y = block.with_nan()
    missing_cols = [j for j in range(block.p) if not block.R[:, j].all()]
    for j in missing_cols:
        observed = block.R[:, j]
        Y[~observed, j] = rng.choice(Y[observed, j], size=int((~observed).sum()), replace=True)

    for _ in range(cfg.iters):
        # screening follows the block as completed so far
        screens = completed_screens(Y, cfg.max_screen)
        for j in missing_cols:
            observed = block.R[:, j]
            chosen = screens[j]
            X_obs = block.X[observed]
            S_all = Y[:, chosen]
            max_keep = min(chosen.size, int(observed.sum()) - block.k - 1)
            kept = chosen[_keep_screened(X_obs, S_all[observed], max_keep)]

            design = np.hstack([block.X, Y[:, kept]])
            coef, sigma = bayesian_regression_draw(rng, design[observed], Y[observed, j])
            Y[~observed, j] = design[~observed] @ coef + sigma * rng.standard_normal(int((~observed).sum()))
    return Y, screens


def mice_impute(block, cfg):
    """
    Screened Gaussian FCS imputation

    Args:
        block (MaskedBlock): data with mask and design
        cfg (FcsConfig): imputations, iterations, screening size, seed, workers

    Returns:
        ImputationEnsemble: M independently generated completed blocks
    """
    counts = block.R.sum(axis=0)
    short = np.flatnonzero(counts < MIN_OBSERVED_PER_COLUMN)
    if short.size:
        raise AllMissingColumn(f"columns with fewer than {MIN_OBSERVED_PER_COLUMN} observed cells: "
                               f"{short.tolist()}")
    logger.info(f"mice: n={block.n} p={block.p} M={cfg.M} iters={cfg.iters} "
                f"max_screen={cfg.max_screen}")
    start = time.perf_counter()

    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.M)]

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            runs = list(pool.map(lambda rng: _impute_once(block, cfg, rng), streams))
    else:
        runs = [_impute_once(block, cfg, rng) for rng in streams]

    elapsed = time.perf_counter() - start
    logger.info(f"mice finished in {elapsed:.2f}s")
    config = cfg.to_dict()
    # predictor sets of the first imputation's final sweep
    config['screened_predictors'] = [chosen.tolist() for chosen in runs[0][1]]
    return ImputationEnsemble(
        method=ImputationMethod.MICE, draws=np.stack([Y for Y, _ in runs]), mask=block.R,
        elapsed_seconds=elapsed, config=config, seed=cfg.seed, columns=block.columns,
    )
