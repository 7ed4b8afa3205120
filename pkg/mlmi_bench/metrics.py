#!/usr/bin/env python3
"""
Metrics - Performance measures (bias, EmpSE, ModSE, coverage, Monte Carlo errors) and CSV tables
"""
import argparse
import logging
import math
import os
import sys
from typing import List, Mapping, Optional

import numpy as np
import pandas as pd

from mlmi_bench import setup_logging
from mlmi_bench.lib.analysis_pooling import VC_NAMES
from mlmi_bench.lib.config_discovery import read_truth

logger = logging.getLogger(__name__)

RESULTS_FILE = 'results.csv'
TRUTH_FILE = 'truth.txt'
METRICS_FILE = 'metrics.csv'

TABLE_COLUMNS = ['Average Estimate', 'Bias', 'Relative Bias (%)', 'Emp SE', 'Model SE', 'Coverage']
MCSE_COLUMNS = ['MCSE Coverage', 'MCSE Bias', 'MCSE Emp SE']
KEY_COLUMNS = ['scenario', 'method', 'parameter']
PERFORMANCE_COLUMNS = KEY_COLUMNS + ['n_reps'] + TABLE_COLUMNS + MCSE_COLUMNS

PARAMETER_GROUPS = {'coefficients': ('beta1', 'beta3'), 'variance': VC_NAMES}


class MissingTruthError(KeyError):
    """No true value for a parameter present in the results"""


def _group_of(parameter: str) -> str:
    for group, names in PARAMETER_GROUPS.items():
        if parameter in names:
            return group
    return 'other'


def performance_row(estimates: np.ndarray, std_errors: np.ndarray, ci_low: np.ndarray, ci_high: np.ndarray,
                    true_value: float, with_interval: bool = True) -> dict:
    """
    Performance measures over R replications of one (scenario, method, parameter)

    Args:
        estimates: point estimates
        std_errors: model standard errors (sqrt of total variance)
        ci_low, ci_high: interval limits
        true_value: data-generating value
        with_interval: False for variance components (no SE or coverage)

    Returns:
        dict keyed by TABLE_COLUMNS + MCSE_COLUMNS plus n_reps
    """
    r = len(estimates)
    if r < 2:
        raise ValueError(f'performance measures need at least 2 replications, got {r}')
    average = float(np.mean(estimates))
    bias = average - true_value
    emp_se = float(np.std(estimates, ddof=1))
    row = {
        'n_reps': r,
        'Average Estimate': average,
        'Bias': bias,
        'Relative Bias (%)': 100.0 * bias / true_value if true_value != 0 else math.nan,
        'Emp SE': emp_se,
        'Model SE': math.nan,
        'Coverage': math.nan,
        'MCSE Coverage': math.nan,
        'MCSE Bias': emp_se / math.sqrt(r),
        'MCSE Emp SE': emp_se / math.sqrt(2 * (r - 1)),
    }
    if with_interval:
        covered = float(np.mean((ci_low <= true_value) & (true_value <= ci_high)))
        row['Model SE'] = float(np.mean(std_errors))
        row['Coverage'] = 100.0 * covered
        row['MCSE Coverage'] = 100.0 * math.sqrt(covered * (1 - covered) / r)
    return row


def compute_metrics(results: pd.DataFrame, truth: Mapping[str, float]) -> pd.DataFrame:
    """
    Build the performance table from raw per-replication rows

    Rows without an estimate (failed fits) are dropped; row order follows first appearance,
    i.e. method registration order.

    Raises:
        MissingTruthError: a parameter in the results has no true value
    """
    missing = sorted(set(results['parameter']) - set(truth)) if len(results) else []
    if missing:
        raise MissingTruthError(f'no true value for {", ".join(missing)}')
    usable = results[np.isfinite(results['estimate'].astype(float))]
    dropped = len(results) - len(usable)
    if dropped:
        logger.warning(f'{dropped} result rows without an estimate were excluded')

    rows = []
    for (scenario, method, parameter), group in usable.groupby(KEY_COLUMNS, sort=False):
        measures = performance_row(group['estimate'].to_numpy(float), group['se'].to_numpy(float),
                                   group['ci_low'].to_numpy(float), group['ci_high'].to_numpy(float),
                                   float(truth[parameter]), with_interval=parameter not in VC_NAMES)
        rows.append({'scenario': scenario, 'method': method, 'parameter': parameter, **measures})
    return pd.DataFrame(rows, columns=PERFORMANCE_COLUMNS)


def emit_tables(table: pd.DataFrame, out_dir: str) -> List[str]:
    """
    Write metrics.csv (full table) and one CSV per (scenario, parameter group)

    Returns:
        written paths
    """
    os.makedirs(out_dir, exist_ok=True)
    full_path = os.path.join(out_dir, METRICS_FILE)
    table.to_csv(full_path, index=False, lineterminator='\n')
    paths = [full_path]
    if table.empty:
        return paths
    groups = table['parameter'].map(_group_of)
    for scenario in table['scenario'].unique():
        for group in PARAMETER_GROUPS:
            selected = table[(table['scenario'] == scenario) & (groups == group)]
            if selected.empty:
                continue
            path = os.path.join(out_dir, f'{scenario}_{group}.csv')
            selected[KEY_COLUMNS + TABLE_COLUMNS].to_csv(path, index=False, lineterminator='\n')
            paths.append(path)
    return paths


def read_table(path: str) -> pd.DataFrame:
    return pd.read_csv(path)


def read_results(in_dir: str) -> pd.DataFrame:
    path = os.path.join(in_dir, RESULTS_FILE)
    if not os.path.exists(path):
        raise FileNotFoundError(f'{path} not found (run `mlmi-bench run` first)')
    return pd.read_csv(path)


def parse_args(argv: Optional[List[str]] = None):
    parser = argparse.ArgumentParser(description='Compute performance measures from a results directory')
    parser.add_argument('--in', dest='in_dir', type=str, required=True,
                        help='Directory containing results.csv')
    parser.add_argument('--truth', type=str, default=None,
                        help='Truth file with "name = value" lines (default: <in>/truth.txt)')
    parser.add_argument('--out', type=str, default=None,
                        help='Output directory for tables (default: same as --in)')
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None):
    """Main entry point"""
    args = parse_args(argv)
    truth_path = args.truth or os.path.join(args.in_dir, TRUTH_FILE)
    try:
        results = read_results(args.in_dir)
        truth = read_truth(truth_path)
        table = compute_metrics(results, truth)
        paths = emit_tables(table, args.out or args.in_dir)
    except (OSError, ValueError, MissingTruthError) as e:
        print(f'Error: {e}', file=sys.stderr)
        sys.exit(1)

    with pd.option_context('display.width', 160, 'display.max_columns', 20):
        print(table[KEY_COLUMNS + TABLE_COLUMNS].to_string(index=False, float_format=lambda v: f'{v:.4f}'))
    for path in paths:
        print(f'✓ Wrote {path}')


if __name__ == '__main__':
    setup_logging()
    main()
