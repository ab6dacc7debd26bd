#!/usr/bin/env python3
"""
Chain state, configuration and ensemble types shared by every imputation method
"""

from collections import Counter
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import EB_TERMS, JITTER_MAX
from errors import ConfigError


class ImputationMethod(Enum):
    MVN_DA = "mvn_da"
    HIMA = "hima"
    HIMCE = "himce"
    MICE = "mice"


class CovarianceBranch(Enum):
    EXACT_REFRESH = "exact_refresh"
    COVARIANCE_MODE = "covariance_mode"


class CovarianceUpdate(Enum):
    EB_MODE = "eb_mode"
    CONJUGATE_MODE = "conjugate_mode"
    SHRINK = "shrink"
    RIDGE = "ridge"


class StabilizationKind(Enum):
    JITTER = "jitter"
    NEAREST_SPD = "nearest_spd"
    LAMBDA_CLAMP = "lambda_clamp"


@dataclass
class StabilizationEvent:
    kind: StabilizationKind
    iteration: int
    detail: str = ""


@dataclass
class ChainConfig:
    M: int = 20
    T_burn: int = 8
    thin: int = 1
    inner: int = 2
    alpha_ridge: float = 1.0
    eps_jitter: float = 1e-4
    bridge: bool = True
    bridge_df: float = 18.0
    bridge_max: float = 1.6
    exact_refresh_max_p: int = 10
    screen_size: int = 10
    eb_terms: int = EB_TERMS
    eb_fit_iters: int = 18
    covariance_update: CovarianceUpdate = CovarianceUpdate.EB_MODE
    shrink_gamma: float = 0.1
    ridge_tau: float = 1e-3
    calibrate: bool = True
    holdout_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.covariance_update, CovarianceUpdate):
            try:
                self.covariance_update = CovarianceUpdate(self.covariance_update)
            except ValueError:
                raise ConfigError(f"unknown covariance_update {self.covariance_update!r}")
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))

    def validate(self):
        """Return a list of constraint violations (empty when valid)"""
        errors = []
        if self.M < 2:
            errors.append("M must be at least 2")
        if self.T_burn < 0:
            errors.append("T_burn must be non-negative")
        if self.thin < 1:
            errors.append("thin must be at least 1")
        if self.inner < 1:
            errors.append("inner must be at least 1")
        if self.alpha_ridge <= 0:
            errors.append("alpha_ridge must be positive")
        if not 0 <= self.eps_jitter <= JITTER_MAX:
            errors.append(f"eps_jitter must lie in [0, {JITTER_MAX}]")
        if self.bridge_df <= 2:
            errors.append("bridge_df must exceed 2")
        if self.bridge_max < 1:
            errors.append("bridge_max must be at least 1")
        if self.exact_refresh_max_p < 0:
            errors.append("exact_refresh_max_p must be non-negative")
        if self.screen_size < 0:
            errors.append("screen_size must be non-negative")
        if self.eb_terms < 1:
            errors.append("eb_terms must be at least 1")
        if self.eb_fit_iters < 0:
            errors.append("eb_fit_iters must be non-negative")
        if not 0 <= self.shrink_gamma <= 1:
            errors.append("shrink_gamma must lie in [0, 1]")
        if self.ridge_tau <= 0:
            errors.append("ridge_tau must be positive")
        if not 0 < self.holdout_frac <= 0.5:
            errors.append("holdout_frac must lie in (0, 0.5]")
        if self.covariance_update is CovarianceUpdate.CONJUGATE_MODE and self.screen_size != 0:
            errors.append("conjugate_mode covariance update requires screen_size = 0")
        return errors

    def to_dict(self):
        snapshot = asdict(self)
        snapshot['covariance_update'] = self.covariance_update.value
        return snapshot


@dataclass
class ChainState:
    """Current iterate of a chain; observed cells of Y_star never change"""
    Y_star: np.ndarray
    B: Optional[np.ndarray]
    Sigma: np.ndarray
    rng: np.random.Generator
    mean: Optional[np.ndarray] = None
    iter: int = 0
    stabilization_log: List[StabilizationEvent] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class ImputationEnsemble:
    """M completed datasets plus method metadata"""
    method: ImputationMethod
    draws: np.ndarray
    mask: np.ndarray
    elapsed_seconds: float
    config: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    columns: Sequence[str] = ()
    branch: Optional[CovarianceBranch] = None
    stabilization: Sequence[StabilizationEvent] = ()
    eb_fingerprint: Optional[str] = None
    final_sigma: Optional[np.ndarray] = None
    calibration: Optional[Dict[str, Any]] = None
    calibration_seconds: float = 0.0

    def __post_init__(self):
        draws = np.array(self.draws, dtype=float)
        mask = np.asarray(self.mask).astype(bool)
        if draws.ndim != 3 or draws.shape[1:] != mask.shape:
            raise ConfigError(f"draws shape {draws.shape} does not match mask shape {mask.shape}")
        if draws.shape[0] < 2:
            raise ConfigError("an ensemble needs at least 2 completed datasets")
        draws.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, 'draws', draws)
        object.__setattr__(self, 'mask', mask)
        object.__setattr__(self, 'stabilization', tuple(self.stabilization))

    @property
    def M(self):
        return self.draws.shape[0]

    @property
    def n(self):
        return self.draws.shape[1]

    @property
    def p(self):
        return self.draws.shape[2]

    def posterior_mean(self):
        return self.draws.mean(axis=0)

    def missing_cells(self):
        """Row and column indices of the imputed cells, row-major order"""
        return np.nonzero(~self.mask)

    def cell_draws(self):
        """L x M matrix of draws for the imputed cells"""
        rows, cols = self.missing_cells()
        return self.draws[:, rows, cols].T

    def stabilization_counts(self):
        counts = Counter(event.kind.value for event in self.stabilization)
        return {kind.value: counts.get(kind.value, 0) for kind in StabilizationKind}


def serialize_ensemble_meta(ensemble):
    """Convert ensemble metadata to a JSON serializable dict"""
    return {
        'method': ensemble.method.value,
        'M': ensemble.M,
        'n': ensemble.n,
        'p': ensemble.p,
        'columns': list(ensemble.columns),
        'config': ensemble.config,
        'seed': ensemble.seed,
        'elapsed_seconds': ensemble.elapsed_seconds,
        'calibration_seconds': ensemble.calibration_seconds,
        'branch': ensemble.branch.value if ensemble.branch else None,
        'stabilization': ensemble.stabilization_counts(),
        'eb_fingerprint': ensemble.eb_fingerprint,
        'calibration': ensemble.calibration,
    }
