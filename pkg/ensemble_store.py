#!/usr/bin/env python3
"""
Ensemble Store Module
Reads data blocks from CSV and saves / loads ensemble directories
(imp_001.csv ... imp_MMM.csv, mask.csv, meta.json)
"""

import json
import logging
import sys
from pathlib import Path

try:
    import resource
except ImportError:  # Windows
    resource = None

import numpy as np
import pandas as pd
import psutil

from chain_state import (
    CovarianceBranch, ImputationEnsemble, ImputationMethod, StabilizationEvent,
    StabilizationKind, serialize_ensemble_meta,
)
from errors import DataFileError
from gaussian_model import MaskedBlock

logger = logging.getLogger(__name__)

IMPUTATION_PATTERN = "imp_{:03d}.csv"
MASK_FILE = "mask.csv"
META_FILE = "meta.json"


# ==================== CSV HELPERS ====================

def write_matrix_csv(path, matrix, columns):
    """Write a matrix with a header row; NaN becomes an empty field"""
    frame = pd.DataFrame(np.asarray(matrix), columns=list(columns))
    frame.to_csv(path, index=False, float_format='%.17g', na_rep='')


def read_matrix_csv(path, columns=None):
    """
    Read a numeric CSV with a header row

    Args:
        path (Path): CSV file
        columns (list): optional subset of columns to return, in this order

    Returns:
        tuple: (values ndarray with NaN for empty fields, column names)
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataFileError(f"Cannot parse {path}: {e}")

    if columns is not None:
        absent = [name for name in columns if name not in frame.columns]
        if absent:
            raise DataFileError(f"{path} has no columns {absent}")
        frame = frame[list(columns)]
    try:
        values = frame.apply(pd.to_numeric, errors='raise').to_numpy(dtype=float)
    except (ValueError, TypeError) as e:
        raise DataFileError(f"{path} contains non-numeric fields: {e}")
    return values, [str(name) for name in frame.columns]


def read_block(data_path, design_path=None, targets=None, design=None):
    """
    Build a MaskedBlock from CSV input

    With design_path the design matrix is the whole design file. Otherwise
    X is an intercept plus the named `design` columns of the data file.

    Args:
        data_path (Path): responses, empty field = missing
        design_path (Path): optional fully observed design CSV
        targets (list): optional response column subset
        design (list): design column names inside the data file

    Returns:
        MaskedBlock: responses, mask and design
    """
    Y, columns = read_matrix_csv(data_path, targets)
    if design_path is not None:
        X, _ = read_matrix_csv(design_path)
        if X.shape[0] != Y.shape[0]:
            raise DataFileError(f"{design_path} has {X.shape[0]} rows, {data_path} has {Y.shape[0]}")
    else:
        X = np.ones((Y.shape[0], 1))
        if design:
            extra, _ = read_matrix_csv(data_path, design)
            X = np.column_stack([X, extra])
    logger.info(f"Loaded block {Y.shape[0]}x{Y.shape[1]} with {X.shape[1]} design columns "
                f"from {data_path}")
    return MaskedBlock.from_nan(Y, X, columns)


def peak_rss_mb(memory=None):
    """Peak resident set size of this process in MiB"""
    if resource is not None:
        peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
        # bytes on macOS, KiB elsewhere
        return peak / (1024 * 1024) if sys.platform == 'darwin' else peak / 1024
    memory = memory or psutil.Process().memory_info()
    return getattr(memory, 'peak_wset', memory.rss) / (1024 * 1024)


def resource_usage():
    """Current and peak resident memory (MiB) and CPU seconds of the current process"""
    process = psutil.Process()
    memory = process.memory_info()
    cpu = process.cpu_times()
    rss = memory.rss / (1024 * 1024)
    return {
        'rss_mb': rss,
        'peak_rss_mb': max(peak_rss_mb(memory), rss),
        'cpu_seconds': cpu.user + cpu.system,
    }


# ==================== ENSEMBLE DIRECTORY ====================

class EnsembleStore:
    """
    Handles reading and writing of one ensemble directory
    """

    def __init__(self, root):
        """
        Initialize store at an output directory

        Args:
            root (Path): ensemble directory (created on save)
        """
        self.root = Path(root)

    def imputation_paths(self):
        return sorted(self.root.glob("imp_*.csv"))

    def validate_output_dir(self):
        """
        Validate that the ensemble directory can be written

        Returns:
            tuple: (is_valid: bool, message: str)
        """
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            if not self.root.is_dir():
                return False, f"{self.root} is not a directory"
            test_file = self.root / ".test_write_permission"
            try:
                test_file.write_text("test")
                test_file.unlink()
                return True, "Output directory is writable"
            except PermissionError:
                return False, f"{self.root} is not writable"
        except OSError as e:
            return False, f"Output directory validation error: {e}"

    def save(self, ensemble, extra=None):
        """
        Write all completed datasets, the mask and meta.json

        Args:
            ensemble (ImputationEnsemble): ensemble to store
            extra (dict): additional meta entries (e.g. shared fit fingerprint)

        Returns:
            Path: the ensemble directory
        """
        ok, message = self.validate_output_dir()
        if not ok:
            raise DataFileError(message)
        for stale in self.imputation_paths():
            stale.unlink()

        for m in range(ensemble.M):
            write_matrix_csv(self.root / IMPUTATION_PATTERN.format(m + 1), ensemble.draws[m],
                             ensemble.columns)
        write_matrix_csv(self.root / MASK_FILE, ensemble.mask.astype(int), ensemble.columns)

        meta = serialize_ensemble_meta(ensemble)
        meta['stabilization_events'] = [
            {'kind': e.kind.value, 'iteration': e.iteration, 'detail': e.detail}
            for e in ensemble.stabilization
        ]
        meta['resources'] = resource_usage()
        meta.update(extra or {})
        with open(self.root / META_FILE, 'w') as f:
            json.dump(meta, f, indent=2, default=float)

        logger.info(f"Saved {ensemble.method.value} ensemble ({ensemble.M} datasets) to {self.root}")
        return self.root

    def load_meta(self):
        path = self.root / META_FILE
        if not path.exists():
            raise DataFileError(f"{path} not found")
        try:
            with open(path, 'r') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise DataFileError(f"Cannot parse {path}: {e}")

    def load(self):
        """
        Read an ensemble directory back

        Returns:
            ImputationEnsemble: draws, mask and metadata as saved
        """
        meta = self.load_meta()
        paths = self.imputation_paths()
        if len(paths) != meta['M']:
            raise DataFileError(f"{self.root} holds {len(paths)} imputations, meta.json says {meta['M']}")

        draws = [read_matrix_csv(path)[0] for path in paths]
        mask, columns = read_matrix_csv(self.root / MASK_FILE)
        events = [
            StabilizationEvent(StabilizationKind(e['kind']), e['iteration'], e.get('detail', ''))
            for e in meta.get('stabilization_events', [])
        ]
        return ImputationEnsemble(
            method=ImputationMethod(meta['method']),
            draws=np.stack(draws),
            mask=mask.astype(bool),
            elapsed_seconds=meta['elapsed_seconds'],
            config=meta.get('config') or {},
            seed=meta.get('seed'),
            columns=columns,
            branch=CovarianceBranch(meta['branch']) if meta.get('branch') else None,
            stabilization=events,
            eb_fingerprint=meta.get('eb_fingerprint'),
            calibration=meta.get('calibration'),
            calibration_seconds=meta.get('calibration_seconds', 0.0),
        )
