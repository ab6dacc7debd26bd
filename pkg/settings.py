#!/usr/bin/env python3
"""
Run settings: defaults, JSON loading, validation, CLI overrides and the
typed RunConfig built from them.

Precedence is CLI flag > settings file > built-in default.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple

from config import SETTINGS_FILE
from benchmark import SpatialSimConfig
from chain_state import ChainConfig, CovarianceUpdate, ImputationMethod
from errors import ConfigError
from mice_fcs import FcsConfig

logger = logging.getLogger(__name__)

# CLI flag (argparse dest) -> settings key
OVERRIDE_FLAGS = {
    'seed': 'seed',
    'method': 'method',
    'm': 'M',
    'mask_rate': 'mask_rate',
    'replicates': 'replicates',
    'workers': 'workers',
    'out': 'out',
}


def get_default_settings():
    """Get default run settings"""
    return {
        # Chains
        'M': 20,
        'burn_in': 8,
        'thin': 1,
        'inner': 2,
        'alpha_ridge': 1.0,
        'eps_jitter': 1e-4,
        'bridge': True,
        'bridge_df': 18.0,
        'bridge_max': 1.6,
        'exact_refresh_max_p': 10,
        'screen_size': 10,
        'eb_terms': 25,
        'eb_fit_iters': 18,
        'covariance_update': 'eb_mode',
        'shrink_gamma': 0.1,
        'ridge_tau': 1e-3,
        'calibrate': True,
        'holdout_frac': 0.2,

        # Prior
        'nu0_offset': 2.0,
        's0_scale': 1.0,

        # MICE
        'mice_iters': 10,
        'mice_max_screen': 20,

        # Spatial simulation
        'n': 80,
        'grid': [8, 8],
        'p': 40,
        'kernel_scale': 2.0,
        'kernel_var': 1.0,
        'nugget': 0.1,
        'strong_slope': 0.8,
        'weak_slope': 0.2,
        'strong_slope_cols': 10,
        'mask_rate': 0.3,

        # Benchmark
        'replicates': 10,
        'lowdim_targets': ['bmi', 'chl'],
        'lowdim_design': ['age'],

        # Run
        'seed': 0,
        'method': 'himce',
        'workers': 1,
        'allow_skip': False,
        'out': 'covmode_out',
    }


def load_settings(path=None):
    """
    Load settings from a JSON file merged over the defaults

    Args:
        path (Path): settings file; the shipped file is used when omitted
            and present

    Returns:
        dict: merged settings

    Raises:
        ConfigError: on malformed JSON or unknown keys
    """
    settings = get_default_settings()
    if path is None:
        if not SETTINGS_FILE.exists():
            return settings
        path = SETTINGS_FILE

    path = Path(path)
    with open(path, 'r') as f:
        try:
            saved_settings = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Cannot parse settings file {path}: {e}")
    if not isinstance(saved_settings, dict):
        raise ConfigError(f"Settings file {path} must hold a JSON object")

    unknown = sorted(set(saved_settings) - set(settings))
    if unknown:
        raise ConfigError(f"Unknown settings in {path}: {', '.join(unknown)}")
    settings.update(saved_settings)
    logger.debug(f"Loaded settings from {path}")
    return settings


def save_settings(settings, path):
    """Save settings to a JSON file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(settings, f, indent=2)
    logger.info(f"Settings saved to {path}")
    return path


def apply_overrides(settings, args):
    """Return a copy of settings with every CLI flag that was given applied"""
    merged = dict(settings)
    for flag, key in OVERRIDE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    if getattr(args, 'allow_skip', False):
        merged['allow_skip'] = True
    return merged


def validate_settings(settings):
    """Validate settings data, returning a list of error strings"""
    errors = []

    integer_fields = {
        'M': (2, 10000),
        'burn_in': (0, 100000),
        'thin': (1, 10000),
        'inner': (1, 10000),
        'exact_refresh_max_p': (0, 100000),
        'screen_size': (0, 100000),
        'eb_terms': (1, 1000),
        'eb_fit_iters': (0, 10000),
        'mice_iters': (1, 10000),
        'mice_max_screen': (0, 100000),
        'n': (2, 10 ** 7),
        'p': (2, 100000),
        'strong_slope_cols': (0, 100000),
        'replicates': (1, 100000),
        'seed': (0, 2 ** 63 - 1),
        'workers': (1, 1024),
    }
    for name, (min_val, max_val) in integer_fields.items():
        value = settings.get(name)
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{name} must be an integer")
        elif not min_val <= value <= max_val:
            errors.append(f"{name} must be between {min_val} and {max_val}")

    # (low, high, low inclusive, high inclusive)
    real_fields = {
        'alpha_ridge': (0.0, None, False, False),
        'eps_jitter': (0.0, 1e-2, True, True),
        'bridge_df': (2.0, None, False, False),
        'bridge_max': (1.0, None, True, False),
        'shrink_gamma': (0.0, 1.0, True, True),
        'ridge_tau': (0.0, None, False, False),
        'holdout_frac': (0.0, 0.5, False, True),
        'nu0_offset': (1.0, None, False, False),
        's0_scale': (0.0, None, False, False),
        'kernel_scale': (0.0, None, False, False),
        'kernel_var': (0.0, None, False, False),
        'nugget': (0.0, None, True, False),
        'strong_slope': (None, None, True, True),
        'weak_slope': (None, None, True, True),
        'mask_rate': (0.0, 1.0, False, False),
    }
    for name, (low, high, low_closed, high_closed) in real_fields.items():
        value = settings.get(name)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{name} must be a number")
            continue
        if low is not None and (value < low or (value == low and not low_closed)):
            errors.append(f"{name} must be {'>=' if low_closed else '>'} {low}")
        if high is not None and (value > high or (value == high and not high_closed)):
            errors.append(f"{name} must be {'<=' if high_closed else '<'} {high}")

    for name in ('bridge', 'calibrate', 'allow_skip'):
        if not isinstance(settings.get(name), bool):
            errors.append(f"{name} must be true or false")

    if settings.get('method') not in {m.value for m in ImputationMethod}:
        errors.append(f"method must be one of {', '.join(m.value for m in ImputationMethod)}")
    if settings.get('covariance_update') not in {u.value for u in CovarianceUpdate}:
        errors.append(f"covariance_update must be one of "
                      f"{', '.join(u.value for u in CovarianceUpdate)}")
    elif settings['covariance_update'] == 'conjugate_mode' and settings.get('screen_size') != 0:
        errors.append("conjugate_mode covariance update requires screen_size = 0")

    grid = settings.get('grid')
    if not (isinstance(grid, (list, tuple)) and len(grid) == 2
            and all(isinstance(g, int) and g >= 1 for g in grid)):
        errors.append("grid must be a list of two positive integers")
    elif isinstance(settings.get('p'), int) and settings['p'] > grid[0] * grid[1]:
        errors.append(f"p must not exceed the {grid[0] * grid[1]} lattice sites")

    for name in ('lowdim_targets', 'lowdim_design'):
        value = settings.get(name)
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            errors.append(f"{name} must be a list of column names")
    if not settings.get('lowdim_targets'):
        errors.append("lowdim_targets must name at least one column")

    if not isinstance(settings.get('out'), str) or not settings.get('out'):
        errors.append("out must be a directory path")
    return errors


@dataclass
class RunConfig:
    """Typed view of validated settings"""
    chain: ChainConfig
    fcs: FcsConfig
    sim: SpatialSimConfig
    method: ImputationMethod
    prior_kwargs: Dict[str, float]
    workers: int
    allow_skip: bool
    out: Path
    lowdim_targets: Tuple[str, ...]
    lowdim_design: Tuple[str, ...]
    settings: Dict[str, Any] = field(default_factory=dict)

    @property
    def seed(self):
        return self.chain.seed


def build_run_config(settings):
    """
    Validate settings and build the RunConfig

    Raises:
        ConfigError: listing every validation failure
    """
    errors = validate_settings(settings)
    if errors:
        raise ConfigError("Invalid settings: " + "; ".join(errors))

    s = settings
    chain = ChainConfig(
        M=s['M'], T_burn=s['burn_in'], thin=s['thin'], inner=s['inner'],
        alpha_ridge=float(s['alpha_ridge']), eps_jitter=float(s['eps_jitter']),
        bridge=s['bridge'], bridge_df=float(s['bridge_df']), bridge_max=float(s['bridge_max']),
        exact_refresh_max_p=s['exact_refresh_max_p'], screen_size=s['screen_size'],
        eb_terms=s['eb_terms'], eb_fit_iters=s['eb_fit_iters'],
        covariance_update=CovarianceUpdate(s['covariance_update']),
        shrink_gamma=float(s['shrink_gamma']), ridge_tau=float(s['ridge_tau']),
        calibrate=s['calibrate'], holdout_frac=float(s['holdout_frac']), seed=s['seed'],
    )
    fcs = FcsConfig(M=s['M'], iters=s['mice_iters'], max_screen=s['mice_max_screen'],
                    seed=s['seed'], workers=s['workers'])
    sim = SpatialSimConfig(
        n=s['n'], grid=tuple(s['grid']), p=s['p'], kernel_scale=float(s['kernel_scale']),
        kernel_var=float(s['kernel_var']), nugget=float(s['nugget']),
        strong_slope=float(s['strong_slope']), weak_slope=float(s['weak_slope']),
        strong_slope_cols=s['strong_slope_cols'], mask_rate=float(s['mask_rate']),
        replicates=s['replicates'], seed=s['seed'],
    )
    return RunConfig(
        chain=chain, fcs=fcs, sim=sim, method=ImputationMethod(s['method']),
        prior_kwargs={'nu0_offset': float(s['nu0_offset']), 's0_scale': float(s['s0_scale'])},
        workers=s['workers'], allow_skip=s['allow_skip'], out=Path(s['out']),
        lowdim_targets=tuple(s['lowdim_targets']), lowdim_design=tuple(s['lowdim_design']),
        settings=dict(s),
    )
