#!/usr/bin/env python3
"""
Configuration constants for the covmode imputation engine
"""

import os
import logging
from pathlib import Path

logger = logging.getLogger(__name__)

# Settings file
SETTINGS_FILE = Path("config/covmode_settings.json")
RESOLVED_SETTINGS_NAME = "resolved_settings.json"

# Logging
LOG_ENV_VAR = "COVMODE_LOG"
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
LOG_LEVELS = {'DEBUG', 'INFO', 'WARNING', 'ERROR'}

# Exit codes
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

# SPD utilities
EIGEN_FLOOR = 1e-8          # absolute and relative floor for nearest_spd
JITTER_MIN = 1e-6
JITTER_MAX = 1e-2
JITTER_RETRIES = 3          # retries with eps, 10*eps, 100*eps

# Empirical-Bayes covariance fit
EB_TERMS = 25               # 2F1 truncation
EB_MIN_ROWS = 4
EB_LAMBDA_FLOOR = 1e-6
EB_RHO_CLAMP = 0.999

# Chains
MVN_DA_MAX_P = 200

# Calibration layer
CALIBRATION_WEIGHT_GRID = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)
CALIBRATION_MIN_OBSERVED = 8
CALIBRATION_MIN_HOLDOUT = 3
CALIBRATION_SSE_TOLERANCE = 0.01   # relative slack that favours larger weights
CALIBRATION_SLOPE_PRIOR_CELLS = 10  # pseudo-cells pulling the recentring slope toward 1
CALIBRATION_MIN_GAIN = 0.10         # leave-one-out SSE gain a column map must show over raw HIMCE
CALIBRATION_KS_SLACK = 0.02
CALIBRATION_SCALE_GRID = (0.5, 3.0, 0.05)   # start, stop, step for the deviation scale

# MICE comparator
FCS_PIVOT_TOL = 1e-10
FCS_RIDGE_FALLBACK = 1e-6

# Diagnostics
QQ_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
CENTRAL_BAND = (0.4, 0.6)
QUANTILE_METHOD = "linear"
UNIFORM_PIT_SD = 12 ** -0.5

# Benchmark
MASK_MAX_ATTEMPTS = 100
MIN_OBSERVED_PER_COLUMN = 2
LOWDIM_MIN_COMPLETE_ROWS = 8
NUGGET_FLOOR_FRACTION = 1e-6
BENCHMARK_METRICS = (
    'rmse', 'mae', 'time', 'p_central', 'cov_iqr', 'cov90', 'cov95',
    'pit_mean', 'pit_sd', 'pit_ks', 'mean_gap', 'sd_gap', 'iqr_gap', 'qq_gap',
)


def setup_logging(level=None):
    """Configure root logging from an explicit level or the COVMODE_LOG variable"""
    requested = (level or os.environ.get(LOG_ENV_VAR) or 'INFO').upper()
    if requested not in LOG_LEVELS:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        logger.warning(f"Unknown log level {requested!r} in {LOG_ENV_VAR}, using INFO")
        return logging.INFO

    numeric = getattr(logging, requested)
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
    logging.getLogger().setLevel(numeric)
    return numeric
