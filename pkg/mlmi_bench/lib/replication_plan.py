"""
Replication Plan - Per-replication seeds, per-method streams and the run manifest
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional

from mlmi_bench import __version__
from mlmi_bench.lib.config_discovery import Preset
from mlmi_bench.lib.dgp import ScenarioConfig
from mlmi_bench.lib.methods import REFERENCE_METHOD, parse_method

logger = logging.getLogger(__name__)

SEED_BITS = 63


def _hash_seed(*parts) -> int:
    digest = hashlib.sha256(':'.join(str(p) for p in parts).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') & ((1 << SEED_BITS) - 1)


def replication_seed(master_seed: int, index: int, attempt: int = 0) -> int:
    """Seed of replication `index`; attempt 1 is the replacement after a failure"""
    return _hash_seed('rep', master_seed, index, attempt)


def method_seed(rep_seed: int, label: str) -> int:
    """Method stream derived from the replication seed and the label only"""
    return _hash_seed('method', rep_seed, label)


@dataclass(frozen=True)
class ReplicationSeeds:
    """Seeds of one replication attempt"""
    index: int
    attempt: int
    seed: int


class ReplicationPlan:
    """Replications of one scenario and their seeds"""

    def __init__(self, scenario: ScenarioConfig, methods: List[str], reps: int, preset: Preset,
                 master_seed: Optional[int] = None):
        """
        Initialize replication plan

        Args:
            scenario: scenario to simulate
            methods: method labels in registration order
            reps: number of replications
            preset: imputation settings
            master_seed: defaults to the scenario seed
        """
        if reps < 1:
            raise ValueError(f'reps must be >= 1, got {reps}')
        for label in methods:
            parse_method(label)
        self.scenario = scenario
        self.methods = list(methods)
        self.reps = reps
        self.preset = preset
        self.master_seed = scenario.seed if master_seed is None else int(master_seed)

    def seeds(self, index: int, attempt: int = 0) -> ReplicationSeeds:
        if not 0 <= index < self.reps:
            raise IndexError(f'replication {index} outside 0..{self.reps - 1}')
        return ReplicationSeeds(index, attempt, replication_seed(self.master_seed, index, attempt))

    def get_all_replications(self) -> List[ReplicationSeeds]:
        return [self.seeds(i) for i in range(self.reps)]

    def method_configs(self) -> Dict[str, Dict[str, object]]:
        """Sampler settings per label (seed left at 0; streams come from method_seed)"""
        configs = {}
        for label in self.methods:
            spec = parse_method(label)
            if label == REFERENCE_METHOD:
                configs[label] = {}
                continue
            cfg = asdict(self.preset.imputation_config(spec.family))
            cfg['variant'] = spec.variant.value
            del cfg['seed']
            configs[label] = cfg
        return configs

    def manifest(self) -> 'RunManifest':
        return RunManifest(
            master_seed=self.master_seed,
            reps=self.reps,
            methods=list(self.methods),
            scenario=scenario_to_dict(self.scenario),
            preset=self.preset.to_dict(),
            method_configs=self.method_configs(),
            version=__version__,
            replication_seeds=[s.seed for s in self.get_all_replications()],
        )

    @classmethod
    def from_manifest(cls, manifest: 'RunManifest') -> 'ReplicationPlan':
        return cls(scenario_from_dict(manifest.scenario), manifest.methods, manifest.reps,
                   Preset.from_dict(manifest.preset), manifest.master_seed)


def scenario_to_dict(cfg: ScenarioConfig) -> Dict[str, object]:
    return {
        'name': cfg.name,
        'n_schools': cfg.n_schools,
        'school_size': cfg.school_size,
        'analysis_model': cfg.analysis_model.value,
        'mechanism': cfg.mechanism.value,
        'target_missing': {str(w): float(p) for w, p in sorted(cfg.target_missing.items())},
        'ses_mcar_rate': cfg.ses_mcar_rate,
        'seed': cfg.seed,
    }


def scenario_from_dict(values: Mapping[str, object]) -> ScenarioConfig:
    values = dict(values)
    values['target_missing'] = {int(w): float(p) for w, p in values['target_missing'].items()}
    return ScenarioConfig(**values)


@dataclass
class RunManifest:
    """Everything needed to rerun a scenario byte-identically"""
    master_seed: int
    reps: int
    methods: List[str]
    scenario: Dict[str, object]
    preset: Dict[str, object]
    method_configs: Dict[str, Dict[str, object]]
    version: str
    replication_seeds: List[int]
    retries: List[Dict[str, int]] = field(default_factory=list)

    def record_retry(self, index: int, original_seed: int, replacement_seed: int):
        self.retries.append({'replication': index, 'original_seed': original_seed,
                             'replacement_seed': replacement_seed})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + '\n'

    def write(self, path: str):
        with open(path, 'w') as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> 'RunManifest':
        with open(path, 'r') as f:
            return cls(**json.load(f))
