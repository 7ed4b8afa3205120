#!/usr/bin/env python3
"""
Command line interface for mlmi-bench
"""
import argparse
import os
import sys

import numpy as np

from mlmi_bench import setup_logging


def cmd_run(args):
    """Run replications of one scenario"""
    from mlmi_bench import run
    run.main(args)


def cmd_metrics(args):
    """Compute performance tables from a results directory"""
    from mlmi_bench import metrics
    metrics.main(args)


def cmd_plot(args):
    """Draw SVG figures from a results directory"""
    from mlmi_bench import plots
    plots.main(args)


def cmd_generate(args):
    """Write one simulated dataset (optionally amputed) to CSV for inspection"""
    from mlmi_bench.lib.config_discovery import ConfigDiscovery, load_config
    from mlmi_bench.lib.data_model import write_csv
    from mlmi_bench.lib.dgp import (MissingnessSpec, ParamSet, calibrate_missingness_intercepts,
                                    generate_complete, impose_missingness)

    parser = argparse.ArgumentParser(description='Generate one dataset of a scenario')
    parser.add_argument('--config', type=str, default=None, help='Scenario config file')
    parser.add_argument('--scenario', type=str, required=True, help='Scenario section name')
    parser.add_argument('--seed', type=int, default=None, help='Seed (default: scenario seed)')
    parser.add_argument('--amputed', action='store_true', help='Impose the scenario missingness')
    parser.add_argument('--out', type=str, required=True, help='Output CSV path (a .meta sidecar is written too)')
    parsed = parser.parse_args(args)

    try:
        config_path = ConfigDiscovery.discover_all(parsed.config)
        if config_path is None:
            raise FileNotFoundError('no scenario config found; pass --config or set MLMI_CONFIG')
        scenario = load_config(config_path).scenario(parsed.scenario)
    except (OSError, KeyError, ValueError) as e:
        message = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f'Error: {message}')
        sys.exit(1)

    rng = np.random.default_rng(scenario.seed if parsed.seed is None else parsed.seed)
    data = generate_complete(scenario, ParamSet.for_model(scenario.analysis_model), rng)
    if parsed.amputed:
        spec = MissingnessSpec.for_mechanism(scenario.mechanism)
        zeta0 = calibrate_missingness_intercepts(data, spec, scenario.target_missing)
        data = impose_missingness(data, spec.with_intercepts(zeta0), scenario, rng)
        for wave, value in sorted(zeta0.items()):
            print(f'  zeta0[wave {wave}] = {value:.4f}')
    out_dir = os.path.dirname(parsed.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    write_csv(data, parsed.out)
    print(f'✓ Wrote {data.n_rows} rows ({data.n_missing()} missing cells) to {parsed.out}')


def main():
    """Main entry point"""
    argv = sys.argv[1:]
    verbose = any(a in ('-v', '--verbose') for a in argv)
    argv = [a for a in argv if a not in ('-v', '--verbose')]

    if not argv or argv[0] in ['-h', '--help', 'help']:
        print('MLMI Bench - 多层多重插补方法模拟比较工具')
        print()
        print('Usage: mlmi-bench [-v] <command> [arguments]')
        print()
        print('Commands:')
        print('  run --scenario NAME [options]')
        print('      Run simulation replications for one scenario across all requested methods')
        print('      Writes manifest.json, results.csv, diagnostics.csv and truth.txt to the output directory.')
        print()
        print('      Options:')
        print('        --config PATH       Scenario config file (default: MLMI_CONFIG env, then packaged)')
        print('        --methods LIST      Comma-separated method labels or "all" (default: all)')
        print('        --reps N            Number of replications (default: from preset)')
        print('        --preset NAME       desk or paper (default: MLMI_PRESET env or desk)')
        print('        --workers K         Worker processes (default: MLMI_WORKERS env or 1)')
        print('        --seed N            Master seed (default: scenario seed)')
        print('        --out DIR           Output directory (default: results/<scenario>)')
        print('        --manifest PATH     Rerun an existing manifest.json byte-identically')
        print('        --dry-run           Write the manifest without running')
        print()
        print('      Examples:')
        print('        mlmi-bench run --scenario model1-40x30-MAR_CATS --reps 2 --methods JM-1L-DI-wide')
        print('        mlmi-bench run --scenario model2-40x30-MAR_CATS --preset desk --workers 8')
        print()
        print('  metrics --in DIR [--truth FILE] [--out DIR]')
        print('      Compute bias, relative bias, EmpSE, ModSE and coverage per method and parameter')
        print()
        print('  plot --in DIR [--truth FILE] [--out DIR]')
        print('      Draw bias box plots and EmpSE/ModSE dot plots (SVG)')
        print()
        print('  generate --scenario NAME --out FILE [--amputed] [--seed N]')
        print('      Write one generated dataset to CSV for inspection')
        print()
        print('Environment:')
        print('  MLMI_CONFIG, MLMI_PRESET, MLMI_WORKERS, MLMI_LOG_LEVEL')
        print()
        print('For more information, see README.md')
        sys.exit(0 if argv and argv[0] in ['-h', '--help', 'help'] else 1)

    setup_logging(verbose)
    command = argv[0]
    args = argv[1:]

    if command == 'run':
        cmd_run(args)
    elif command == 'metrics':
        cmd_metrics(args)
    elif command == 'plot':
        cmd_plot(args)
    elif command == 'generate':
        cmd_generate(args)
    else:
        print(f'Error: Unknown command: {command}')
        print('Available commands: run, metrics, plot, generate')
        sys.exit(1)


if __name__ == '__main__':
    main()
