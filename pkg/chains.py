#!/usr/bin/env python3
"""
Joint-model imputation chains

mvn_da is the exact data-augmentation reference sampler. hima_chain and
himce_chain replace covariance sampling with the empirical-Bayes covariance
mode: HIMA follows a deterministic mean/covariance path, HIMCE draws
coefficients and missing cells and optionally inflates the mode with a
scalar bridge. Small blocks switch HIMCE to an exact inverse-Wishart refresh.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy import linalg

from config import MVN_DA_MAX_P, EB_MIN_ROWS
from chain_state import (
    ChainConfig, ChainState, CovarianceBranch, CovarianceUpdate, ImputationEnsemble,
    ImputationMethod, StabilizationEvent, StabilizationKind,
)
from eb_covariance import EbFit, conjugate_mode_update, eb_covariance_fit
from errors import InvalidParameter, ValidationError
from gaussian_model import (
    coefficient_posterior, complete_data_posterior, conditional_sigma_scale,
    draw_inverse_wishart, draw_matrix_normal, impute_missing, iw_mode, screen_columns,
)
from spd_linalg import cholesky, ridge_covariance, shrink_covariance, symmetrize

logger = logging.getLogger(__name__)


@dataclass
class SharedFit:
    """Deterministic fill-and-refit result shared by HIMA and HIMCE"""
    Y_star: np.ndarray
    B: np.ndarray
    fit: EbFit
    elapsed_seconds: float
    events: List[StabilizationEvent] = field(default_factory=list)

    @property
    def fingerprint(self):
        return self.fit.fingerprint()


# ==================== BUILDING BLOCKS ====================

def ridge_fill(block, prior):
    """Fill missing cells with per-column ridge posterior means fitted on observed rows"""
    Y = block.with_nan()
    for j in range(block.p):
        observed = block.R[:, j]
        if observed.all():
            continue
        X_obs = block.X[observed]
        precision = X_obs.T @ X_obs + prior.V0_inv
        rhs = X_obs.T @ Y[observed, j] + prior.V0_inv @ prior.B0[:, j]
        coef = cholesky(symmetrize(precision)).solve(rhs)
        Y[~observed, j] = block.X[~observed] @ coef
    return Y


def _record_fit(fit, events, iteration):
    if fit.spd_projected:
        events.append(StabilizationEvent(StabilizationKind.NEAREST_SPD, iteration, "eb mode"))
    if fit.lambda_clamped:
        events.append(StabilizationEvent(StabilizationKind.LAMBDA_CLAMP, iteration,
                                         f"lambda={fit.lambda_eb:g}"))


def _check_eb_block(block):
    if block.p < 2:
        raise ValidationError("covariance-mode chains need at least 2 columns")
    if block.n < EB_MIN_ROWS:
        raise ValidationError(f"covariance-mode chains need at least {EB_MIN_ROWS} rows")


def fit_shared_covariance(block, prior, cfg):
    """
    Ridge fill followed by cfg.eb_fit_iters conditional-mean fill and EB refit sweeps

    Returns:
        SharedFit: completed block, coefficients, EB fit and timing
    """
    _check_eb_block(block)
    start = time.perf_counter()
    events = []

    Y = ridge_fill(block, prior)
    _, _, B = coefficient_posterior(Y, block.X, prior)
    fit = eb_covariance_fit(Y - block.X @ B, cfg.eb_terms)
    _record_fit(fit, events, 0)

    for sweep in range(1, cfg.eb_fit_iters + 1):
        Y = impute_missing(Y, block.R, block.X @ B, fit.Sigma_mode, draw=False,
                           eps=cfg.eps_jitter, events=events, iteration=-sweep)
        _, _, B = coefficient_posterior(Y, block.X, prior)
        fit = eb_covariance_fit(Y - block.X @ B, cfg.eb_terms)
        _record_fit(fit, events, -sweep)

    elapsed = time.perf_counter() - start
    logger.debug(f"Shared EB fit: rho_bar={fit.rho_bar:.3f} lambda={fit.lambda_eb:.3g} "
                 f"in {elapsed:.3f}s")
    return SharedFit(Y_star=Y, B=B, fit=fit, elapsed_seconds=elapsed, events=events)


def scalar_bridge(rng, Sigma_mode, df, bridge_max):
    """Scale the covariance mode by s = df / chi2_df clamped to [1/bridge_max, bridge_max]"""
    if not df > 2:
        raise InvalidParameter(f"bridge df must exceed 2, got {df}")
    if bridge_max < 1:
        raise InvalidParameter(f"bridge_max must be at least 1, got {bridge_max}")
    s = df / rng.chisquare(df)
    s = min(max(s, 1.0 / bridge_max), bridge_max)
    return s * np.asarray(Sigma_mode, dtype=float)


def ridge_coefficient_draw(rng, Y, X, prior, Sigma):
    """Column-wise ridge posterior draw: b_j ~ N(b_hat_j, Sigma_jj Vn)"""
    _, Vn, Bn = coefficient_posterior(Y, X, prior)
    L_V = cholesky(Vn).lower
    scale = np.sqrt(np.diag(Sigma))
    return Bn + (L_V @ rng.standard_normal(Bn.shape)) * scale[None, :]


def local_ridge_draw(rng, Y, X, screens, alpha, Sigma):
    """
    Screened local ridge mean

    Column j is regressed on X and its screened block columns; coefficients
    are drawn from the Gaussian ridge posterior with variance Sigma_jj.

    Returns:
        ndarray: n x p fitted means
    """
    mean = np.empty_like(Y)
    sd = np.sqrt(np.diag(Sigma))
    for j, chosen in enumerate(screens):
        design = np.hstack([X, Y[:, chosen]])
        factor = cholesky(design.T @ design + alpha * np.eye(design.shape[1]))
        coef = factor.solve(design.T @ Y[:, j])
        noise = linalg.solve_triangular(factor.lower, rng.standard_normal(coef.size),
                                        lower=True, trans='T')
        mean[:, j] = design @ (coef + sd[j] * noise)
    return mean


def covariance_mode(cfg, residuals, Y, B, X, prior, events, iteration):
    """Stabilized covariance update selected by cfg.covariance_update"""
    update = cfg.covariance_update
    if update is CovarianceUpdate.EB_MODE:
        fit = eb_covariance_fit(residuals, cfg.eb_terms)
        _record_fit(fit, events, iteration)
        return fit.Sigma_mode
    if update is CovarianceUpdate.CONJUGATE_MODE:
        return conjugate_mode_update(B, Y, X, prior)

    S_E = residuals.T @ residuals / residuals.shape[0]
    if update is CovarianceUpdate.SHRINK:
        return shrink_covariance(S_E, cfg.shrink_gamma)
    return ridge_covariance(S_E, cfg.ridge_tau)


def _run_schedule(state, sweep, store, cfg, per_draw):
    for _ in range(cfg.T_burn):
        sweep(state)
    draws = []
    for m in range(cfg.M):
        for _ in range(per_draw):
            sweep(state)
        draws.append(store(state))
        logger.debug(f"Stored draw {m + 1}/{cfg.M} at iteration {state.iter}")
    return np.stack(draws)


def _warn_events(method, events):
    projections = sum(1 for e in events if e.kind is StabilizationKind.NEAREST_SPD)
    if projections:
        logger.warning(f"{method.value}: {projections} SPD projections during the run")


# ==================== REFERENCE SAMPLER ====================

def data_augmentation_step(state, R, X, prior):
    """
    One exact data-augmentation sweep

    Draws the missing cells given (B, Sigma), then Sigma ~ IW(nun, Sn) and
    B ~ MN(Bn, Vn, Sigma) given the completed block.
    """
    state.iter += 1
    state.Y_star = impute_missing(state.Y_star, R, X @ state.B, state.Sigma, state.rng,
                                  draw=True, eps=0.0, events=state.stabilization_log,
                                  iteration=state.iter)
    post = complete_data_posterior(state.Y_star, X, prior)
    state.Sigma = draw_inverse_wishart(state.rng, post.nun, post.Sn)
    state.B = draw_matrix_normal(state.rng, post.Bn, post.Vn, state.Sigma)
    return state


def mvn_da(block, prior, cfg):
    """
    Reference multivariate-normal data augmentation

    Args:
        block (MaskedBlock): data with mask and design
        prior (PriorSpec): conjugate hyperparameters
        cfg (ChainConfig): M, T_burn, thin and seed are used

    Returns:
        ImputationEnsemble: every thin-th post-burn-in completed block
    """
    if block.p > MVN_DA_MAX_P:
        raise ValidationError(f"mvn_da supports p <= {MVN_DA_MAX_P}, got {block.p}")
    logger.info(f"mvn_da: n={block.n} p={block.p} M={cfg.M} missing={block.n_missing}")
    start = time.perf_counter()

    Y = ridge_fill(block, prior)
    post = complete_data_posterior(Y, block.X, prior)
    state = ChainState(Y_star=Y, B=post.Bn, Sigma=iw_mode(post.nun, post.Sn),
                       rng=np.random.default_rng(cfg.seed))

    draws = _run_schedule(
        state,
        lambda s: data_augmentation_step(s, block.R, block.X, prior),
        lambda s: s.Y_star.copy(),
        cfg, cfg.thin,
    )
    elapsed = time.perf_counter() - start
    logger.info(f"mvn_da finished in {elapsed:.2f}s")
    return ImputationEnsemble(
        method=ImputationMethod.MVN_DA, draws=draws, mask=block.R, elapsed_seconds=elapsed,
        config=cfg.to_dict(), seed=cfg.seed, columns=block.columns,
        stabilization=state.stabilization_log, final_sigma=state.Sigma,
    )


# ==================== COVARIANCE-MODE CHAINS ====================

def _start_state(shared, block, seed):
    return ChainState(Y_star=shared.Y_star.copy(), B=shared.B.copy(),
                      Sigma=shared.fit.Sigma_mode.copy(), rng=np.random.default_rng(seed),
                      mean=block.X @ shared.B, stabilization_log=list(shared.events))


def hima_chain(block, prior, cfg, shared=None):
    """
    Deterministic covariance-mode chain

    Iterations fill missing cells with their conditional mean, refit the
    ridge mean and refit the EB covariance mode. Each stored dataset draws the
    missing cells once from the conditional law at the current iterate.
    """
    _check_eb_block(block)
    logger.info(f"hima: n={block.n} p={block.p} M={cfg.M} missing={block.n_missing}")
    start = time.perf_counter()
    carried = shared.elapsed_seconds if shared is not None else 0.0
    shared = shared or fit_shared_covariance(block, prior, cfg)
    state = _start_state(shared, block, cfg.seed)
    X, R = block.X, block.R

    def sweep(s):
        s.iter += 1
        s.Y_star = impute_missing(s.Y_star, R, s.mean, s.Sigma, draw=False, eps=cfg.eps_jitter,
                                  events=s.stabilization_log, iteration=s.iter)
        _, _, s.B = coefficient_posterior(s.Y_star, X, prior)
        s.mean = X @ s.B
        fit = eb_covariance_fit(s.Y_star - s.mean, cfg.eb_terms)
        _record_fit(fit, s.stabilization_log, s.iter)
        s.Sigma = fit.Sigma_mode

    def store(s):
        return impute_missing(s.Y_star, R, s.mean, s.Sigma, s.rng, draw=True, eps=cfg.eps_jitter,
                              events=s.stabilization_log, iteration=s.iter)

    draws = _run_schedule(state, sweep, store, cfg, cfg.thin * cfg.inner)
    elapsed = time.perf_counter() - start + carried
    _warn_events(ImputationMethod.HIMA, state.stabilization_log)
    logger.info(f"hima finished in {elapsed:.2f}s")
    return ImputationEnsemble(
        method=ImputationMethod.HIMA, draws=draws, mask=R, elapsed_seconds=elapsed,
        config=cfg.to_dict(), seed=cfg.seed, columns=block.columns,
        branch=CovarianceBranch.COVARIANCE_MODE, stabilization=state.stabilization_log,
        eb_fingerprint=shared.fingerprint, final_sigma=state.Sigma,
    )


def himce_branch(p, cfg):
    if p <= cfg.exact_refresh_max_p:
        return CovarianceBranch.EXACT_REFRESH
    return CovarianceBranch.COVARIANCE_MODE


def himce_chain(block, prior, cfg, shared=None):
    """
    Stochastic covariance-mode chain

    Missing cells are always drawn. Blocks with p <= exact_refresh_max_p
    draw B from its matrix-normal conditional and refresh Sigma from its
    inverse-Wishart conditional (no bridge). Larger blocks draw a ridge or
    screened local-ridge mean and use the stabilized covariance mode,
    optionally inflated by the scalar bridge.
    """
    _check_eb_block(block)
    branch = himce_branch(block.p, cfg)
    logger.info(f"himce: n={block.n} p={block.p} M={cfg.M} branch={branch.value}")
    start = time.perf_counter()
    carried = shared.elapsed_seconds if shared is not None else 0.0
    shared = shared or fit_shared_covariance(block, prior, cfg)
    state = _start_state(shared, block, cfg.seed)
    X, R = block.X, block.R

    screens = None
    if branch is CovarianceBranch.COVARIANCE_MODE and cfg.screen_size > 0:
        screens = screen_columns(block.available_case_correlation(), cfg.screen_size)

    def exact_refresh(s):
        _, Vn, Bn = coefficient_posterior(s.Y_star, X, prior)
        s.B = draw_matrix_normal(s.rng, Bn, Vn, s.Sigma)
        s.mean = X @ s.B
        nu_c, S_c = conditional_sigma_scale(s.B, s.Y_star, X, prior)
        s.Sigma = draw_inverse_wishart(s.rng, nu_c, S_c)

    def mode_update(s):
        if screens is None:
            s.B = ridge_coefficient_draw(s.rng, s.Y_star, X, prior, s.Sigma)
            s.mean = X @ s.B
        else:
            s.B = None
            s.mean = local_ridge_draw(s.rng, s.Y_star, X, screens, cfg.alpha_ridge, s.Sigma)
        mode = covariance_mode(cfg, s.Y_star - s.mean, s.Y_star, s.B, X, prior,
                               s.stabilization_log, s.iter)
        s.Sigma = scalar_bridge(s.rng, mode, cfg.bridge_df, cfg.bridge_max) if cfg.bridge else mode

    refresh = exact_refresh if branch is CovarianceBranch.EXACT_REFRESH else mode_update

    def sweep(s):
        s.iter += 1
        s.Y_star = impute_missing(s.Y_star, R, s.mean, s.Sigma, s.rng, draw=True,
                                  eps=cfg.eps_jitter, events=s.stabilization_log, iteration=s.iter)
        refresh(s)

    draws = _run_schedule(state, sweep, lambda s: s.Y_star.copy(), cfg, cfg.thin * cfg.inner)
    elapsed = time.perf_counter() - start + carried
    _warn_events(ImputationMethod.HIMCE, state.stabilization_log)
    logger.info(f"himce finished in {elapsed:.2f}s")
    return ImputationEnsemble(
        method=ImputationMethod.HIMCE, draws=draws, mask=R, elapsed_seconds=elapsed,
        config=cfg.to_dict(), seed=cfg.seed, columns=block.columns, branch=branch,
        stabilization=state.stabilization_log, eb_fingerprint=shared.fingerprint,
        final_sigma=state.Sigma,
    )
