#!/usr/bin/env python3
"""
covmode command-line entry point

Commands: simulate, impute, diagnose, bench {spatial, lowdim}.
Every command prints its resolved settings and exits with 0 on success,
2 on validation errors, 3 on numerical failures and 4 on I/O errors.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from config import EXIT_IO, EXIT_OK, RESOLVED_SETTINGS_NAME, setup_logging
from benchmark import (
    mask_mcar, run_lowdim_benchmark, run_spatial_benchmark, simulate_spatial, summary_frame,
    write_lowdim_fixture,
)
from calibration import himce_with_calibration
from chain_state import ImputationMethod
from chains import hima_chain, mvn_da
from diagnostics import diagnose, overlay_frame, pit_frame
from ensemble_store import EnsembleStore, read_block, read_matrix_csv, write_matrix_csv
from errors import ConfigError, CovmodeError
from gaussian_model import PriorSpec, default_column_names
from mice_fcs import mice_impute
from settings import apply_overrides, build_run_config, load_settings, save_settings

logger = logging.getLogger(__name__)


def _column_list(text):
    return [name.strip() for name in text.split(',') if name.strip()] if text else None


# ==================== COMMANDS ====================

def cmd_simulate(run, args):
    """Write truth.csv, masked.csv, mask.csv and design.csv for one simulated block"""
    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(run.seed)
    Y, X = simulate_spatial(run.sim, rng)
    columns = default_column_names(Y.shape[1])
    block, withheld = mask_mcar(rng, Y, run.sim.mask_rate, X, columns)

    write_matrix_csv(out / "truth.csv", Y, columns)
    write_matrix_csv(out / "masked.csv", block.with_nan(), columns)
    write_matrix_csv(out / "mask.csv", block.R.astype(int), columns)
    write_matrix_csv(out / "design.csv", X, ['intercept', 'age'])
    logger.info(f"Simulated {block.n}x{block.p} block with {withheld.size} masked cells in {out}")
    return EXIT_OK


def impute_block(method, block, run):
    """Dispatch one imputation method on a block"""
    prior = PriorSpec.default(block.p, block.k, alpha=run.chain.alpha_ridge, **run.prior_kwargs)
    if method is ImputationMethod.MVN_DA:
        return mvn_da(block, prior, run.chain)
    if method is ImputationMethod.HIMA:
        return hima_chain(block, prior, run.chain)
    if method is ImputationMethod.HIMCE:
        return himce_with_calibration(block, prior, run.chain)[0]
    return mice_impute(block, run.fcs)


def cmd_impute(run, args):
    """Impute a CSV block and save the ensemble directory"""
    if not args.data:
        raise ConfigError("impute needs --data")
    block = read_block(args.data, args.design, _column_list(args.targets),
                       _column_list(args.covariates))
    ensemble = impute_block(run.method, block, run)
    EnsembleStore(run.out).save(ensemble)
    save_settings(run.settings, run.out / RESOLVED_SETTINGS_NAME)
    print(f"{ensemble.method.value}: {ensemble.M} datasets in {ensemble.elapsed_seconds:.2f}s "
          f"-> {run.out}")
    return EXIT_OK


def cmd_diagnose(run, args):
    """Score an ensemble directory against a truth CSV"""
    if not args.ensemble or not args.truth:
        raise ConfigError("diagnose needs --ensemble and --truth")
    ensemble = EnsembleStore(args.ensemble).load()
    truth, _ = read_matrix_csv(args.truth)
    report = diagnose(ensemble, truth, np.random.default_rng(run.seed))

    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", 'w') as f:
        json.dump(report.to_dict(), f, indent=2)
    pit_frame(ensemble, truth, report).to_csv(out / "pit_export.csv", index=False,
                                              float_format='%.17g')
    overlay_frame(ensemble, truth).to_csv(out / "overlay_export.csv", index=False,
                                          float_format='%.17g')
    pd.DataFrame(report.pooled_means).to_csv(out / "pooled_means.csv", index=False,
                                             float_format='%.17g')
    print(f"{report.method}: rmse={report.rmse:.4f} cov90={report.cov90:.4f} "
          f"cov95={report.cov95:.4f} pit_ks={report.pit_ks:.4f} ({report.n_cells} cells)")
    return EXIT_OK


def cmd_bench(run, args):
    """Run the spatial or low-dimensional benchmark and write summary tables"""
    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    save_settings(run.settings, out / RESOLVED_SETTINGS_NAME)

    if args.kind == 'spatial':
        rows, _ = run_spatial_benchmark(run.sim, run.chain, run.fcs, run.prior_kwargs,
                                        run.workers, run.allow_skip, out)
    else:
        data = args.data or write_lowdim_fixture(out / "lowdim_fixture.csv", run.seed)
        targets = _column_list(args.targets) or list(run.lowdim_targets)
        design = _column_list(args.covariates) or list(run.lowdim_design)
        rows, _ = run_lowdim_benchmark(data, targets, design, run.sim.mask_rate,
                                       run.sim.replicates, run.chain, run.fcs, run.seed,
                                       run.prior_kwargs, run.workers, run.allow_skip, out)
    print(summary_frame(rows).to_string(index=False))
    return EXIT_OK


COMMANDS = {
    'simulate': cmd_simulate,
    'impute': cmd_impute,
    'diagnose': cmd_diagnose,
    'bench': cmd_bench,
}


# ==================== ARGUMENTS ====================

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help="JSON settings file")
    common.add_argument('--seed', type=int)
    common.add_argument('--method', choices=[m.value for m in ImputationMethod])
    common.add_argument('--m', type=int, help="number of completed datasets")
    common.add_argument('--mask-rate', type=float)
    common.add_argument('--replicates', type=int)
    common.add_argument('--workers', type=int)
    common.add_argument('--allow-skip', action='store_true', help="skip failing replicates")
    common.add_argument('--out', help="output directory")

    parser = argparse.ArgumentParser(prog='covmode', description=__doc__.strip().splitlines()[0])
    commands = parser.add_subparsers(dest='command', required=True)

    commands.add_parser('simulate', parents=[common], help="simulate and mask a spatial block")

    impute = commands.add_parser('impute', parents=[common], help="impute a CSV block")
    impute.add_argument('--data', type=Path, help="response CSV, empty field = missing")
    impute.add_argument('--design', type=Path, help="fully observed design CSV")
    impute.add_argument('--targets', help="comma-separated response columns")
    impute.add_argument('--covariates', help="comma-separated design columns of --data")

    diag = commands.add_parser('diagnose', parents=[common], help="score an ensemble")
    diag.add_argument('--ensemble', type=Path, help="ensemble directory")
    diag.add_argument('--truth', type=Path, help="truth CSV")

    bench = commands.add_parser('bench', parents=[common], help="run a benchmark")
    bench.add_argument('kind', choices=['spatial', 'lowdim'])
    bench.add_argument('--data', type=Path, help="low-dimensional CSV (fixture when omitted)")
    bench.add_argument('--targets', help="comma-separated target columns")
    bench.add_argument('--covariates', help="comma-separated design columns")
    return parser


def main(argv=None):
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        settings = apply_overrides(load_settings(args.config), args)
        run = build_run_config(settings)
        print(json.dumps(settings, indent=2))
        return COMMANDS[args.command](run, args)
    except CovmodeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO


if __name__ == '__main__':
    sys.exit(main())
