"""
MLMI Bench Library - Data model, simulation, imputation samplers, analysis and the replication harness
"""
from mlmi_bench.lib.config_discovery import ConfigDiscovery, Preset, StudyConfig, load_config
from mlmi_bench.lib.replication_executor import ReplicationExecutor, ReplicationOutcome
from mlmi_bench.lib.replication_plan import ReplicationPlan, RunManifest

__all__ = ['ConfigDiscovery', 'Preset', 'StudyConfig', 'load_config', 'ReplicationExecutor', 'ReplicationOutcome',
           'ReplicationPlan', 'RunManifest']
