"""
Shared fixtures: small generated scenarios and their amputed copies
"""
import numpy as np
import pytest

from mlmi_bench.lib.dgp import (MissingnessSpec, ParamSet, ScenarioConfig, calibrate_missingness_intercepts,
                                generate_complete, impose_missingness)
from mlmi_bench.lib.imputers_conventional import ImputationConfig


@pytest.fixture
def make_scenario():
    """Factory for small scenarios (defaults: 6 schools x 10 children, model1, MAR_CATS)"""
    def _make(model='model1', n_schools=6, school_size=10, mechanism='MAR_CATS', **overrides):
        name = f'{model}-{n_schools}x{school_size}-{mechanism}'
        return ScenarioConfig(name=name, n_schools=n_schools, school_size=school_size, analysis_model=model,
                              mechanism=mechanism, **overrides)
    return _make


@pytest.fixture
def make_data(make_scenario):
    """Factory returning (complete, amputed) long datasets; params overrides generating parameters"""
    def _make(model='model1', seed=7, params=None, **kwargs):
        scenario = make_scenario(model=model, **kwargs)
        rng = np.random.default_rng(seed)
        complete = generate_complete(scenario, ParamSet.for_model(scenario.analysis_model, **(params or {})), rng)
        spec = MissingnessSpec.for_mechanism(scenario.mechanism)
        zeta0 = calibrate_missingness_intercepts(complete, spec, scenario.target_missing)
        amputed = impose_missingness(complete, spec.with_intercepts(zeta0), scenario, rng)
        return complete, amputed
    return _make


@pytest.fixture
def complete_data(make_data):
    return make_data()[0]


@pytest.fixture
def amputed_data(make_data):
    return make_data()[1]


@pytest.fixture
def quick_config():
    """Short chains so sampler tests stay fast"""
    return ImputationConfig(m=3, burn_in=20, between=5, seed=11, pan_iterations=3, chains=2)
