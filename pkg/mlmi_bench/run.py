#!/usr/bin/env python3
"""
Main entry script for running a simulation scenario: replications across all requested imputation methods
"""
import argparse
import logging
import os
import signal
import sys
from typing import List, Optional

import pandas as pd

from mlmi_bench import setup_logging
from mlmi_bench.lib.analysis_pooling import PoolingError
from mlmi_bench.lib.bayes_draws import ImputationError
from mlmi_bench.lib.config_discovery import ConfigDiscovery, load_config, write_truth
from mlmi_bench.lib.data_model import StructuralError
from mlmi_bench.lib.dgp import true_values
from mlmi_bench.lib.methods import MethodModelMismatchError, UnknownMethodError, parse_method, resolve_methods
from mlmi_bench.lib.replication_executor import DIAGNOSTIC_COLUMNS, RESULT_COLUMNS, ReplicationExecutor
from mlmi_bench.lib.replication_plan import ReplicationPlan, RunManifest
from mlmi_bench.metrics import RESULTS_FILE, TRUTH_FILE

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
DIAGNOSTICS_FILE = 'diagnostics.csv'

_interrupted = False


def _signal_handler(signum, frame):
    """Handle SIGINT (Ctrl+C): the worker pool is terminated by the executor on unwind"""
    global _interrupted
    if _interrupted:
        print('\n\nForce terminating...', file=sys.stderr)
        os._exit(130)
    _interrupted = True
    print('\n\nInterrupted by user (Ctrl+C). Stopping workers...', file=sys.stderr)
    sys.stderr.flush()
    raise KeyboardInterrupt


def parse_args(argv: Optional[List[str]] = None):
    """Parse command line arguments"""
    parser = argparse.ArgumentParser(description='Run simulation replications for one scenario')

    env_workers = os.environ.get('MLMI_WORKERS', '')
    env_preset = os.environ.get('MLMI_PRESET', 'desk')

    parser.add_argument('--config', type=str, default=None,
                        help='Scenario config file (default: MLMI_CONFIG env, then packaged configs/scenarios.ini)')
    parser.add_argument('--scenario', type=str, default=None,
                        help='Scenario section name in the config file')
    parser.add_argument('--methods', type=str, default='all',
                        help='Comma-separated method labels or "all" (default: all)')
    parser.add_argument('--reps', type=int, default=None,
                        help='Number of replications (default: from preset)')
    parser.add_argument('--out', type=str, default=None,
                        help='Output directory (default: results/<scenario>)')
    parser.add_argument('--preset', type=str, default=env_preset,
                        help=f'Imputation preset desk|paper (default: {env_preset} from MLMI_PRESET env or desk)')
    parser.add_argument('--workers', type=int, default=int(env_workers) if env_workers else 1,
                        help='Worker processes (default: MLMI_WORKERS env or 1)')
    parser.add_argument('--seed', type=int, default=None,
                        help='Master seed (default: scenario seed)')
    parser.add_argument('--manifest', type=str, default=None,
                        help='Rerun from an existing manifest.json (ignores scenario/methods/reps/preset/seed)')
    parser.add_argument('--dry-run', action='store_true',
                        help='Write the manifest and show the plan without running')
    return parser.parse_args(argv)


def build_plan(args) -> ReplicationPlan:
    """Plan from a manifest or from config + command line"""
    if args.manifest:
        manifest = RunManifest.load(args.manifest)
        logger.info(f'Rerunning manifest {args.manifest}')
        return ReplicationPlan.from_manifest(manifest)

    if not args.scenario:
        raise ValueError('--scenario is required (or --manifest)')
    config_path = ConfigDiscovery.discover_all(args.config)
    if config_path is None:
        raise FileNotFoundError('no scenario config found; pass --config or set MLMI_CONFIG')
    study = load_config(config_path)
    scenario = study.scenario(args.scenario)
    preset = study.preset(args.preset)
    methods = resolve_methods(scenario.analysis_model, args.methods)
    reps = args.reps if args.reps is not None else preset.reps
    logger.info(f'Config: {config_path}')
    return ReplicationPlan(scenario, methods, reps, preset, args.seed)


def _log_conventions(plan: ReplicationPlan):
    if any(parse_method(label).jav for label in plan.methods):
        logger.info('JAV methods are analysed with the imputed derived column in place of the recomputed '
                    'interaction (or square); other methods recompute it from the completed data')


def run_plan(plan: ReplicationPlan, out_dir: str, workers: int = 1) -> RunManifest:
    """
    Execute every replication and write manifest.json, results.csv, diagnostics.csv and truth.txt

    Returns:
        manifest (including any replacement seeds)
    """
    os.makedirs(out_dir, exist_ok=True)
    scenario = plan.scenario
    manifest = plan.manifest()
    write_truth(os.path.join(out_dir, TRUTH_FILE), true_values(scenario.analysis_model))
    _log_conventions(plan)

    executor = ReplicationExecutor(plan)
    results, diagnostics = [], []
    n_failed = 0
    for outcome in executor.execute(workers=workers):
        if outcome.replaced is not None:
            manifest.record_retry(outcome.index, outcome.replaced.seed, outcome.seeds.seed)
        failed = outcome.failed
        n_failed += bool(failed)
        marker = '✗' if failed else '✓'
        suffix = f' (still failing: {", ".join(failed)})' if failed else ''
        logger.info(f'  {marker} replication {outcome.index + 1}/{plan.reps} seed {outcome.seeds.seed}{suffix}')
        results.extend(outcome.result_rows(scenario.name))
        diagnostics.extend(outcome.diagnostic_rows(scenario.name))

    pd.DataFrame(results, columns=RESULT_COLUMNS).to_csv(os.path.join(out_dir, RESULTS_FILE), index=False,
                                                         lineterminator='\n')
    pd.DataFrame(diagnostics, columns=DIAGNOSTIC_COLUMNS).to_csv(os.path.join(out_dir, DIAGNOSTICS_FILE),
                                                                 index=False, lineterminator='\n')
    manifest.write(os.path.join(out_dir, MANIFEST_FILE))
    if n_failed:
        logger.warning(f'{n_failed} replication(s) still had failing methods after replacement')
    return manifest


def main(argv: Optional[List[str]] = None):
    """Main entry point"""
    args = parse_args(argv)
    try:
        plan = build_plan(args)
    except (OSError, KeyError, ValueError, UnknownMethodError, MethodModelMismatchError) as e:
        message = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f'Error: {message}', file=sys.stderr)
        sys.exit(1)

    out_dir = args.out or os.path.join('results', plan.scenario.name)
    logger.info(f'Scenario {plan.scenario.name}: {plan.reps} replications, preset {plan.preset.name}, '
                f'm={plan.preset.m}, {args.workers} worker(s)')
    logger.info(f'Methods: {", ".join(plan.methods)}')

    if args.dry_run:
        os.makedirs(out_dir, exist_ok=True)
        plan.manifest().write(os.path.join(out_dir, MANIFEST_FILE))
        print(f'[DRY RUN] Manifest written to {os.path.join(out_dir, MANIFEST_FILE)}')
        sys.exit(0)

    signal.signal(signal.SIGINT, _signal_handler)
    try:
        run_plan(plan, out_dir, workers=max(args.workers, 1))
    except KeyboardInterrupt:
        sys.exit(130)
    except (OSError, StructuralError, ImputationError, PoolingError) as e:
        print(f'Error: {e}', file=sys.stderr)
        sys.exit(1)
    print(f'\n✓ Scenario {plan.scenario.name} completed; outputs in {out_dir}')


if __name__ == '__main__':
    setup_logging()
    main()
