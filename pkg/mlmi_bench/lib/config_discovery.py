"""
Config Discovery - Locate and parse scenario/preset configuration files and truth files
"""
import configparser
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Mapping, Optional, Tuple

from mlmi_bench import get_package_dir, get_project_root
from mlmi_bench.lib.dgp import DEFAULT_TARGET_MISSING, EXPOSURE_WAVES, ScenarioConfig
from mlmi_bench.lib.imputers_conventional import PRESET_M, SAMPLER_DEFAULTS, ImputationConfig

logger = logging.getLogger(__name__)

CONFIG_ENV = 'MLMI_CONFIG'
CONFIG_FILENAME = 'scenarios.ini'
PRESET_PREFIX = 'preset:'
PRESET_REPS = {'paper': 1000, 'desk': 200}
SCENARIO_KEYS = ('analysis_model', 'n_schools', 'school_size', 'mechanism')

# family -> (burn-in key, spacing key); FCS has no spacing between chains
PRESET_KEYS: Dict[str, Tuple[str, Optional[str]]] = {
    'JM': ('jm_burn_in', 'jm_between'),
    'FCS': ('fcs_cycles', None),
    'SMC-JM-2L': ('smc_jm_2l_burn_in', 'smc_jm_2l_between'),
    'SMC-SM': ('smc_sm_burn_in', 'smc_sm_between'),
    'SMC-JM-3L': ('smc_3l_burn_in', 'smc_3l_thin'),
}


@dataclass(frozen=True)
class Preset:
    """Imputation settings shared by every method of a run"""
    name: str
    reps: int
    m: int
    samplers: Mapping[str, Tuple[int, int]]
    pan_iterations: int = 20
    chains: int = 2
    psr_threshold: float = 1.10
    cluster_means: str = 'latent'

    @classmethod
    def builtin(cls, name: str) -> 'Preset':
        if name not in SAMPLER_DEFAULTS:
            raise KeyError(f'unknown preset {name!r}; available: {", ".join(sorted(SAMPLER_DEFAULTS))}')
        return cls(name, PRESET_REPS[name], PRESET_M[name], dict(SAMPLER_DEFAULTS[name]))

    def imputation_config(self, family: str, seed: int = 0) -> ImputationConfig:
        """
        Sampler settings for one method family

        Args:
            family: JM, FCS, SMC-JM-2L, SMC-SM or SMC-JM-3L
            seed: method stream seed

        Returns:
            ImputationConfig
        """
        burn_in, between = self.samplers[family]
        return ImputationConfig(m=self.m, burn_in=burn_in, between=between, seed=int(seed),
                                pan_iterations=self.pan_iterations, chains=self.chains,
                                cluster_means=self.cluster_means, psr_threshold=self.psr_threshold)

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        out['samplers'] = {family: list(pair) for family, pair in sorted(self.samplers.items())}
        return out

    @classmethod
    def from_dict(cls, values: Mapping[str, object]) -> 'Preset':
        values = dict(values)
        values['samplers'] = {family: tuple(pair) for family, pair in values['samplers'].items()}
        return cls(**values)


@dataclass
class StudyConfig:
    """Parsed configuration file"""
    path: str
    scenarios: Dict[str, ScenarioConfig] = field(default_factory=dict)
    presets: Dict[str, Preset] = field(default_factory=dict)

    def scenario(self, name: str) -> ScenarioConfig:
        if name not in self.scenarios:
            raise KeyError(f'unknown scenario {name!r} in {self.path}; available: {", ".join(self.scenarios)}')
        return self.scenarios[name]

    def preset(self, name: str) -> Preset:
        if name in self.presets:
            return self.presets[name]
        return Preset.builtin(name)


class ConfigDiscovery:
    """Find the scenario configuration file"""

    @staticmethod
    def discover_from_env() -> Optional[str]:
        """
        Config path from MLMI_CONFIG (if explicitly set)

        Returns:
            Path or None
        """
        path = os.environ.get(CONFIG_ENV, '')
        if path and os.path.exists(path):
            return path
        if path:
            logger.warning(f'{CONFIG_ENV}={path} does not exist, ignoring')
        return None

    @staticmethod
    def discover_from_package() -> Optional[str]:
        """Config shipped inside the installed package"""
        path = os.path.join(get_package_dir(), 'configs', CONFIG_FILENAME)
        return path if os.path.exists(path) else None

    @staticmethod
    def discover_from_project_root() -> Optional[str]:
        """Config in the checkout root (development mode)"""
        path = os.path.join(get_project_root(), 'configs', CONFIG_FILENAME)
        return path if os.path.exists(path) else None

    @staticmethod
    def discover_all(explicit: Optional[str] = None) -> Optional[str]:
        """
        Try all discovery methods in order; an explicit path wins and must exist

        Returns:
            Path or None if all methods fail
        """
        if explicit:
            if not os.path.exists(explicit):
                raise FileNotFoundError(f'config file not found: {explicit}')
            return explicit

        methods = [
            ConfigDiscovery.discover_from_env,
            ConfigDiscovery.discover_from_package,
            ConfigDiscovery.discover_from_project_root,
        ]
        for method in methods:
            path = method()
            if path:
                logger.debug(f'config: {path} (via {method.__name__})')
                return path
        return None


def _target_missing(section: configparser.SectionProxy) -> Dict[int, float]:
    return {wave: section.getfloat(f'missing_wave{wave}', DEFAULT_TARGET_MISSING[wave]) for wave in EXPOSURE_WAVES}


def _parse_scenario(name: str, section: configparser.SectionProxy) -> ScenarioConfig:
    missing = [key for key in SCENARIO_KEYS if key not in section]
    if missing:
        raise ValueError(f'missing keys: {", ".join(missing)}')
    return ScenarioConfig(
        name=name,
        n_schools=section.getint('n_schools'),
        school_size=section.getint('school_size'),
        analysis_model=section.get('analysis_model'),
        mechanism=section.get('mechanism'),
        target_missing=_target_missing(section),
        ses_mcar_rate=section.getfloat('ses_mcar_rate', 0.10),
        seed=section.getint('seed', 20200101),
    )


def _parse_preset(name: str, section: configparser.SectionProxy) -> Preset:
    base = Preset.builtin(name) if name in SAMPLER_DEFAULTS else None
    samplers = {}
    for family, (burn_key, between_key) in PRESET_KEYS.items():
        default_burn, default_between = base.samplers[family] if base else (None, 0)
        burn_in = section.getint(burn_key, default_burn)
        between = section.getint(between_key, default_between) if between_key else 0
        if burn_in is None:
            raise ValueError(f'[{PRESET_PREFIX}{name}] is missing {burn_key}')
        samplers[family] = (burn_in, between)
    return Preset(
        name=name,
        reps=section.getint('reps', base.reps if base else 1000),
        m=section.getint('m', base.m if base else 20),
        samplers=samplers,
        pan_iterations=section.getint('pan_iterations', 20),
        chains=section.getint('chains', 2),
        psr_threshold=section.getfloat('psr_threshold', 1.10),
        cluster_means=section.get('cluster_means', 'latent'),
    )


def load_config(path: str) -> StudyConfig:
    """
    Parse an INI file: scenario sections plus [preset:<name>] sections

    Raises:
        FileNotFoundError: path does not exist
        ValueError: malformed section
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f'config file not found: {path}')
    parser = configparser.ConfigParser(inline_comment_prefixes=('#', ';'))
    parser.read(path)
    study = StudyConfig(path=path)
    for section in parser.sections():
        try:
            if section.startswith(PRESET_PREFIX):
                name = section[len(PRESET_PREFIX):]
                study.presets[name] = _parse_preset(name, parser[section])
            else:
                study.scenarios[section] = _parse_scenario(section, parser[section])
        except (TypeError, ValueError) as e:
            raise ValueError(f'{path}: section [{section}]: {e}') from e
    logger.debug(f'loaded {len(study.scenarios)} scenarios and {len(study.presets)} presets from {path}')
    return study


def read_truth(path: str) -> Dict[str, float]:
    """Parse `name = value` lines; blank lines and # comments are skipped"""
    truth = {}
    with open(path, 'r') as f:
        for line_no, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ValueError(f'{path}:{line_no}: expected "name = value", got {line!r}')
            name, value = (part.strip() for part in line.split('=', 1))
            truth[name] = float(value)
    return truth


def write_truth(path: str, truth: Mapping[str, float]):
    with open(path, 'w') as f:
        for name, value in truth.items():
            f.write(f'{name} = {float(value)!r}\n')
