#!/usr/bin/env python3
"""
Plots - SVG figures per scenario: bias distributions and empirical vs model standard errors
"""
import argparse
import logging
import os
import sys
from typing import Dict, List, Mapping, Optional

import numpy as np
import pandas as pd
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from mlmi_bench import setup_logging
from mlmi_bench.lib.config_discovery import read_truth
from mlmi_bench.metrics import PARAMETER_GROUPS, TRUTH_FILE, compute_metrics, read_results

logger = logging.getLogger(__name__)

WHISKER_SCALE = 1.5
ERROR_BAR_Z = 1.96

# Stable hashes in the SVG so reruns are byte-identical
SVG_RC = {'svg.hashsalt': 'mlmi-bench', 'svg.fonttype': 'none', 'font.size': 8}
SVG_METADATA = {'Date': None, 'Creator': None}


def box_stats(values: np.ndarray, label: str = '') -> Dict[str, object]:
    """
    Box statistics with whiskers at the fences Q1 - 1.5 IQR and Q3 + 1.5 IQR

    Points beyond the fences are drawn individually.
    """
    values = np.asarray(values, dtype=float)
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    low, high = q1 - WHISKER_SCALE * iqr, q3 + WHISKER_SCALE * iqr
    return {
        'label': label,
        'q1': float(q1),
        'med': float(median),
        'q3': float(q3),
        'whislo': float(low),
        'whishi': float(high),
        'mean': float(values.mean()),
        'fliers': values[(values < low) | (values > high)],
    }


def _methods_in_order(frame: pd.DataFrame) -> List[str]:
    return list(dict.fromkeys(frame['method']))


def plot_bias_boxes(results: pd.DataFrame, truth: Mapping[str, float], scenario: str, path: str):
    parameters = [p for p in PARAMETER_GROUPS['coefficients'] if p in set(results['parameter'])]
    fig, axes = plt.subplots(1, len(parameters), figsize=(4.5 * len(parameters), 4), squeeze=False)
    for ax, parameter in zip(axes[0], parameters):
        rows = results[(results['parameter'] == parameter) & np.isfinite(results['estimate'].astype(float))]
        methods = _methods_in_order(rows)
        stats = [box_stats(rows.loc[rows['method'] == m, 'estimate'].to_numpy(float) - truth[parameter], m)
                 for m in methods]
        ax.bxp(stats, vert=False, showfliers=True, showmeans=False)
        ax.axvline(0.0, color='grey', linestyle='--', linewidth=0.8)
        ax.set_xlabel(f'bias in {parameter}')
        ax.invert_yaxis()
    fig.suptitle(scenario)
    fig.tight_layout()
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)


def plot_standard_errors(table: pd.DataFrame, scenario: str, path: str):
    """EmpSE as filled dots with +/-1.96 MCSE bars, ModSE as hollow circles"""
    parameters = [p for p in PARAMETER_GROUPS['coefficients'] if p in set(table['parameter'])]
    fig, axes = plt.subplots(1, len(parameters), figsize=(4.5 * len(parameters), 4), squeeze=False)
    for ax, parameter in zip(axes[0], parameters):
        rows = table[table['parameter'] == parameter]
        y = np.arange(len(rows))
        ax.errorbar(rows['Emp SE'], y, xerr=ERROR_BAR_Z * rows['MCSE Emp SE'], fmt='o', color='black',
                    capsize=2, label='Emp SE')
        ax.scatter(rows['Model SE'], y, facecolors='none', edgecolors='tab:red', label='Model SE')
        ax.set_yticks(y)
        ax.set_yticklabels(rows['method'])
        ax.set_xlabel(f'standard error of {parameter}')
        ax.invert_yaxis()
    axes[0][0].legend(loc='best', frameon=False)
    fig.suptitle(scenario)
    fig.tight_layout()
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)


def emit_plots(results: pd.DataFrame, truth: Mapping[str, float], out_dir: str) -> List[str]:
    """
    Write <scenario>_bias.svg and <scenario>_se.svg for every scenario in the results

    Returns:
        written paths
    """
    os.makedirs(out_dir, exist_ok=True)
    table = compute_metrics(results, truth)
    paths = []
    with matplotlib.rc_context(SVG_RC):
        for scenario in results['scenario'].unique():
            subset = results[results['scenario'] == scenario]
            bias_path = os.path.join(out_dir, f'{scenario}_bias.svg')
            plot_bias_boxes(subset, truth, scenario, bias_path)
            se_path = os.path.join(out_dir, f'{scenario}_se.svg')
            plot_standard_errors(table[table['scenario'] == scenario], scenario, se_path)
            paths.extend([bias_path, se_path])
            logger.debug(f'plots for {scenario} written')
    return paths


def parse_args(argv: Optional[List[str]] = None):
    parser = argparse.ArgumentParser(description='Draw bias and standard-error figures from a results directory')
    parser.add_argument('--in', dest='in_dir', type=str, required=True,
                        help='Directory containing results.csv')
    parser.add_argument('--truth', type=str, default=None,
                        help='Truth file (default: <in>/truth.txt)')
    parser.add_argument('--out', type=str, default=None,
                        help='Output directory for SVG files (default: same as --in)')
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None):
    """Main entry point"""
    args = parse_args(argv)
    try:
        results = read_results(args.in_dir)
        truth = read_truth(args.truth or os.path.join(args.in_dir, TRUTH_FILE))
        paths = emit_plots(results, truth, args.out or args.in_dir)
    except (OSError, ValueError, KeyError) as e:
        print(f'Error: {e}', file=sys.stderr)
        sys.exit(1)
    for path in paths:
        print(f'✓ Wrote {path}')


if __name__ == '__main__':
    setup_logging()
    main()
