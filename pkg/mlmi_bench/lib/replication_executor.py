"""
Replication Executor - Runs replications end-to-end (generate, amputate, impute, analyse) in a worker pool
"""
import logging
import multiprocessing
import signal
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from mlmi_bench.lib.analysis_pooling import VC_NAMES, RepEstimate, analyse_complete, analyse_imputed_set
from mlmi_bench.lib.bayes_draws import ImputationError
from mlmi_bench.lib.data_model import LongDataset
from mlmi_bench.lib.dgp import (MissingnessSpec, ParamSet, calibrate_missingness_intercepts, generate_complete,
                                impose_missingness)
from mlmi_bench.lib.imputers_conventional import SamplerDiagnostics
from mlmi_bench.lib.imputers_smc import SubstantiveModelSpec
from mlmi_bench.lib.lmm import RankDeficiencyError
from mlmi_bench.lib.methods import REFERENCE_METHOD, impute, parse_method
from mlmi_bench.lib.replication_plan import ReplicationPlan, ReplicationSeeds, method_seed

logger = logging.getLogger(__name__)

PARAMETERS = ('beta1', 'beta3') + VC_NAMES
RESULT_COLUMNS = ['scenario', 'replication', 'attempt', 'seed', 'method', 'parameter', 'estimate', 'se', 'df',
                  'ci_low', 'ci_high', 'm', 'status']
DIAGNOSTIC_COLUMNS = ['scenario', 'replication', 'method', 'parameter', 'psr', 'acceptance_rate']

STATUS_OK = 'ok'
STATUS_NONCONVERGED = 'nonconverged'
STATUS_PSR = 'psr'
STATUS_ERROR = 'error'

# Numerical failures that trigger a replacement replication; anything else is a bug and propagates
RECOVERABLE_ERRORS = (ImputationError, RankDeficiencyError, np.linalg.LinAlgError)


@dataclass
class MethodOutcome:
    """One method applied to one replication"""
    label: str
    status: str
    estimate: Optional[RepEstimate] = None
    diagnostics: Optional[SamplerDiagnostics] = None
    message: str = ''

    @property
    def failed(self) -> bool:
        return self.status != STATUS_OK


@dataclass
class ReplicationOutcome:
    """All methods of one replication, after at most one replacement"""
    seeds: ReplicationSeeds
    methods: List[MethodOutcome] = field(default_factory=list)
    replaced: Optional[ReplicationSeeds] = None

    @property
    def index(self) -> int:
        return self.seeds.index

    @property
    def failed(self) -> List[str]:
        return [m.label for m in self.methods if m.failed]

    def result_rows(self, scenario: str) -> List[Dict[str, object]]:
        rows = []
        for outcome in self.methods:
            base = {'scenario': scenario, 'replication': self.seeds.index, 'attempt': self.seeds.attempt,
                    'seed': self.seeds.seed, 'method': outcome.label, 'status': outcome.status}
            if outcome.estimate is None:
                for name in PARAMETERS:
                    rows.append({**base, 'parameter': name, 'estimate': np.nan, 'se': np.nan, 'df': np.nan,
                                 'ci_low': np.nan, 'ci_high': np.nan, 'm': 0})
                continue
            for row in outcome.estimate.rows():
                rows.append({**base, **row, 'm': outcome.estimate.m})
        return rows

    def diagnostic_rows(self, scenario: str) -> List[Dict[str, object]]:
        rows = []
        for outcome in self.methods:
            if outcome.diagnostics is None:
                continue
            for row in outcome.diagnostics.rows(outcome.label):
                rows.append({'scenario': scenario, 'replication': self.seeds.index, **row})
        return rows


class ReplicationExecutor:
    """Executes the replications of a plan"""

    def __init__(self, plan: ReplicationPlan):
        """
        Initialize replication executor

        Args:
            plan: scenario, methods, preset and seeds
        """
        self.plan = plan
        scenario = plan.scenario
        self.params = ParamSet.for_model(scenario.analysis_model)
        self.model = SubstantiveModelSpec.for_model(scenario.analysis_model)
        self.missingness = MissingnessSpec.for_mechanism(scenario.mechanism)

    def simulate(self, seeds: ReplicationSeeds) -> Tuple[LongDataset, LongDataset]:
        """
        Generate the complete dataset and its amputed copy

        Returns:
            (complete, amputed)
        """
        scenario = self.plan.scenario
        rng = np.random.default_rng(seeds.seed)
        complete = generate_complete(scenario, self.params, rng)
        zeta0 = calibrate_missingness_intercepts(complete, self.missingness, scenario.target_missing)
        amputed = impose_missingness(complete, self.missingness.with_intercepts(zeta0), scenario, rng)
        return complete, amputed

    def run_method(self, label: str, complete: LongDataset, amputed: LongDataset, rep_seed: int) -> MethodOutcome:
        spec = parse_method(label)
        if label == REFERENCE_METHOD:
            estimate = analyse_complete(self.model, complete)
            status = STATUS_NONCONVERGED if estimate.n_nonconverged else STATUS_OK
            return MethodOutcome(label, status, estimate)

        cfg = self.plan.preset.imputation_config(spec.family, seed=method_seed(rep_seed, label))
        try:
            imputed = impute(label, amputed, self.model, cfg)
            estimate = analyse_imputed_set(self.model, imputed, jav=spec.jav)
        except RECOVERABLE_ERRORS as e:
            return MethodOutcome(label, STATUS_ERROR, message=f'{type(e).__name__}: {e}')

        diagnostics = imputed.diagnostics
        if estimate.n_nonconverged:
            status, message = STATUS_NONCONVERGED, '; '.join(estimate.messages)
        elif not diagnostics.psr_ok:
            status, message = STATUS_PSR, '; '.join(diagnostics.warnings)
        else:
            status, message = STATUS_OK, ''
        return MethodOutcome(label, status, estimate, diagnostics, message)

    def run_attempt(self, seeds: ReplicationSeeds) -> ReplicationOutcome:
        complete, amputed = self.simulate(seeds)
        outcome = ReplicationOutcome(seeds)
        for label in self.plan.methods:
            result = self.run_method(label, complete, amputed, seeds.seed)
            if result.failed:
                logger.warning(f'replication {seeds.index} (seed {seeds.seed}) {label}: {result.status} '
                               f'{result.message}'.rstrip())
            outcome.methods.append(result)
        return outcome

    def run_replication(self, index: int) -> ReplicationOutcome:
        """
        Run one replication; on any failure replace it once with a fresh seed

        The replacement's rows are kept even if it fails again (their status column says so).
        """
        seeds = self.plan.seeds(index)
        logger.debug(f'replication {index}: seed {seeds.seed}')
        outcome = self.run_attempt(seeds)
        if not outcome.failed:
            return outcome

        replacement = self.plan.seeds(index, attempt=1)
        logger.warning(f'replication {index}: {", ".join(outcome.failed)} failed with seed {seeds.seed}; '
                       f'replacing with seed {replacement.seed}')
        retried = self.run_attempt(replacement)
        retried.replaced = seeds
        return retried

    def execute(self, workers: int = 1, indices: Optional[List[int]] = None) -> Iterator[ReplicationOutcome]:
        """
        Yield outcomes in replication order regardless of completion order

        Args:
            workers: process count; 1 runs in the calling process
            indices: subset of replications (default: all)
        """
        indices = list(range(self.plan.reps)) if indices is None else list(indices)
        if workers <= 1 or len(indices) <= 1:
            for index in indices:
                yield self.run_replication(index)
            return

        pool = multiprocessing.Pool(processes=workers, initializer=_ignore_sigint)
        try:
            tasks = [(self, index) for index in indices]
            for outcome in pool.imap(_run_task, tasks, chunksize=1):
                yield outcome
            pool.close()
        except BaseException:
            pool.terminate()
            raise
        finally:
            pool.join()


def _ignore_sigint():
    # The parent owns Ctrl+C and terminates the pool
    signal.signal(signal.SIGINT, signal.SIG_IGN)


def _run_task(task: Tuple[ReplicationExecutor, int]) -> ReplicationOutcome:
    executor, index = task
    return executor.run_replication(index)
