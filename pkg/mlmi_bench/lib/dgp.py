"""
DGP - Complete three-level data generation and MAR/MCAR missingness with calibrated intercepts
"""
import logging
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Dict, Mapping, Optional

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.special import expit

from mlmi_bench.lib.data_model import (CHILD, SCHOOL, WAVE, Column, Level, LongDataset, Role, Schema,
                                       StructuralError, to_float_with_nan)

logger = logging.getLogger(__name__)

ANALYSIS_WAVES = (3, 5, 7)
EXPOSURE_WAVES = (2, 4, 6)
DEFAULT_TARGET_MISSING = {2: 0.15, 4: 0.20, 6: 0.30}
CALIBRATION_BRACKET = 20.0
CALIBRATION_TOL = 1e-12


class AnalysisModel(str, Enum):
    MODEL1 = 'model1'  # dep x wave
    MODEL2 = 'model2'  # dep x ses
    MODEL3 = 'model3'  # dep^2


class Mechanism(str, Enum):
    MAR_CATS = 'MAR_CATS'
    MAR_INFLATED = 'MAR_inflated'


# (beta1, beta3) per analysis model
MODEL_COEFFICIENTS: Dict[AnalysisModel, tuple] = {
    AnalysisModel.MODEL1: (-0.07, 0.013),
    AnalysisModel.MODEL2: (-0.024, 0.023),
    AnalysisModel.MODEL3: (-0.024, -0.009),
}

MECHANISM_SLOPES: Dict[Mechanism, tuple] = {
    Mechanism.MAR_CATS: (1.5, 2.0),
    Mechanism.MAR_INFLATED: (3.0, 4.0),
}


@dataclass(frozen=True)
class ParamSet:
    """Generator coefficients and SDs; defaults are the study values"""
    a: float = 7.0
    b: float = 10.0
    female_prop: float = 0.5
    # baseline numeracy
    eta0: float = -0.74
    eta1: float = 0.23
    eta2: float = 0.07
    eta3: float = 0.22
    sigma_psi: float = 1.0
    # depressive symptoms
    delta0: float = -0.7
    delta1: float = 0.1
    delta2: float = -0.46
    delta3: float = -0.01
    delta4: float = -0.22
    delta5: float = 0.02
    sigma_u3: float = 0.1
    sigma_u2: float = 0.9
    sigma_phi: float = 1.5
    # outcome
    beta0: float = 2.0
    beta1: float = -0.07
    beta2: float = -0.01
    beta3: float = 0.013
    beta4: float = 0.71
    beta5: float = 0.14
    beta6: float = -0.01
    beta7: float = -0.20
    sigma3: float = 0.2
    sigma2: float = 0.7
    sigma1: float = 0.7
    # behaviour problems (auxiliary)
    gamma0: float = 16.2
    gamma1: float = 2.5
    gamma2: float = -0.1
    sigma_v3: float = 0.6
    sigma_v2: float = 4.1
    sigma_eps: float = 2.8

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith('sigma') and getattr(self, f.name) < 0:
                raise ValueError(f'{f.name} must be >= 0, got {getattr(self, f.name)}')
        if not self.a < self.b:
            raise ValueError(f'age bounds require a < b, got a={self.a}, b={self.b}')
        if not 0.0 <= self.female_prop <= 1.0:
            raise ValueError(f'female proportion must lie in [0, 1], got {self.female_prop}')

    @classmethod
    def for_model(cls, model: 'AnalysisModel', **overrides) -> 'ParamSet':
        beta1, beta3 = MODEL_COEFFICIENTS[AnalysisModel(model)]
        return cls(beta1=beta1, beta3=beta3, **overrides)


def true_values(model: AnalysisModel, params: Optional[ParamSet] = None) -> Dict[str, float]:
    """Metric truths: the two exposure coefficients and the variance components (squared SDs)"""
    params = params or ParamSet.for_model(model)
    return {
        'beta1': params.beta1,
        'beta3': params.beta3,
        'vc3': params.sigma3 ** 2,
        'vc2': params.sigma2 ** 2,
        'vc1': params.sigma1 ** 2,
    }


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = 'model1-40x30-MAR_CATS'
    n_schools: int = 40
    school_size: int = 30
    analysis_model: AnalysisModel = AnalysisModel.MODEL1
    mechanism: Mechanism = Mechanism.MAR_CATS
    target_missing: Mapping[int, float] = field(default_factory=lambda: dict(DEFAULT_TARGET_MISSING))
    ses_mcar_rate: float = 0.10
    seed: int = 20200101

    def __post_init__(self):
        object.__setattr__(self, 'analysis_model', AnalysisModel(self.analysis_model))
        object.__setattr__(self, 'mechanism', Mechanism(self.mechanism))
        for wave, prop in self.target_missing.items():
            if wave not in EXPOSURE_WAVES or not 0.0 <= prop <= 1.0:
                raise ValueError(f'invalid missingness target {wave}: {prop}')
        if not 0.0 <= self.ses_mcar_rate <= 1.0:
            raise ValueError(f'ses_mcar_rate must lie in [0, 1], got {self.ses_mcar_rate}')

    @property
    def n_children(self) -> int:
        return self.n_schools * self.school_size


@dataclass(frozen=True)
class MissingnessSpec:
    """zeta1 on next-wave outcome, zeta2 on concurrent SDQ, zeta0 per exposure wave"""
    zeta1: float
    zeta2: float
    zeta0: Mapping[int, float] = field(default_factory=dict)

    @classmethod
    def for_mechanism(cls, mechanism: Mechanism) -> 'MissingnessSpec':
        zeta1, zeta2 = MECHANISM_SLOPES[Mechanism(mechanism)]
        return cls(zeta1, zeta2)

    def with_intercepts(self, zeta0: Mapping[int, float]) -> 'MissingnessSpec':
        return replace(self, zeta0=dict(zeta0))


def scenario_registry(seed: int = 20200101) -> Dict[str, ScenarioConfig]:
    """The twelve study scenarios: 3 models x 2 cluster layouts x 2 mechanisms"""
    registry = {}
    for model in AnalysisModel:
        for n_schools, size in ((40, 30), (10, 120)):
            for mechanism in Mechanism:
                name = f'{model.value}-{n_schools}x{size}-{mechanism.value}'
                registry[name] = ScenarioConfig(name=name, n_schools=n_schools, school_size=size,
                                                analysis_model=model, mechanism=mechanism, seed=seed)
    return registry


def study_schema() -> Schema:
    """Long layout: outcome at wave k, exposure and SDQ at k-1, baselines at wave 1"""
    return Schema((
        Column('napz', Role.OUTCOME, Level.TIME_VARYING, lag=0),
        Column('dep', Role.EXPOSURE, Level.TIME_VARYING, lag=-1),
        Column('sdq', Role.AUXILIARY, Level.TIME_VARYING, lag=-1),
        Column('napz1', Role.CONFOUNDER, Level.CHILD),
        Column('sex', Role.CONFOUNDER, Level.CHILD),
        Column('ses', Role.CONFOUNDER, Level.CHILD),
        Column('age', Role.CONFOUNDER, Level.CHILD),
    ), ANALYSIS_WAVES)


def interaction_term(model: AnalysisModel, dep: np.ndarray, wave: np.ndarray, ses: np.ndarray) -> np.ndarray:
    model = AnalysisModel(model)
    if model == AnalysisModel.MODEL1:
        return dep * wave
    if model == AnalysisModel.MODEL2:
        return dep * ses
    return dep ** 2


def generate_complete(cfg: ScenarioConfig, params: ParamSet, rng: np.random.Generator) -> LongDataset:
    """
    Generate one complete dataset

    Args:
        cfg: scenario (cluster layout and analysis model)
        params: generator parameters
        rng: random stream; identical streams give bit-identical data

    Returns:
        LongDataset with rows for analysis waves 3, 5, 7
    """
    if cfg.n_schools <= 0 or cfg.school_size <= 0:
        raise StructuralError(f'cluster counts must be positive, got {cfg.n_schools} x {cfg.school_size}')
    p = params
    n = cfg.n_children
    n_waves = len(EXPOSURE_WAVES)
    school = np.repeat(np.arange(1, cfg.n_schools + 1), cfg.school_size)
    child = np.tile(np.arange(1, cfg.school_size + 1), cfg.n_schools)

    age = rng.uniform(p.a, p.b, n)
    sex = np.zeros(n)
    sex[rng.permutation(n)[:int(math.floor(p.female_prop * n))]] = 1.0
    ses = rng.standard_normal(n)
    napz1 = p.eta0 + p.eta1 * sex + p.eta2 * age + p.eta3 * ses + p.sigma_psi * rng.standard_normal(n)

    exposure_wave = np.asarray(EXPOSURE_WAVES, dtype=float)[None, :]
    u3 = p.sigma_u3 * rng.standard_normal(cfg.n_schools)
    u2 = p.sigma_u2 * rng.standard_normal(n)
    dep = (p.delta0 + p.delta1 * age[:, None] + p.delta2 * sex[:, None] + p.delta3 * napz1[:, None]
           + p.delta4 * ses[:, None] + p.delta5 * exposure_wave
           + (u3[school - 1] + u2)[:, None] + p.sigma_phi * rng.standard_normal((n, n_waves)))

    outcome_wave = np.asarray(ANALYSIS_WAVES, dtype=float)[None, :]
    alpha3 = p.sigma3 * rng.standard_normal(cfg.n_schools)
    alpha2 = p.sigma2 * rng.standard_normal(n)
    inter = interaction_term(cfg.analysis_model, dep, outcome_wave, ses[:, None])
    napz = (p.beta0 + p.beta1 * dep + p.beta2 * outcome_wave + p.beta3 * inter + p.beta4 * napz1[:, None]
            + p.beta5 * sex[:, None] + p.beta6 * ses[:, None] + p.beta7 * age[:, None]
            + (alpha3[school - 1] + alpha2)[:, None] + p.sigma1 * rng.standard_normal((n, n_waves)))

    v3 = p.sigma_v3 * rng.standard_normal(cfg.n_schools)
    v2 = p.sigma_v2 * rng.standard_normal(n)
    sdq = (p.gamma0 + p.gamma1 * dep + p.gamma2 * exposure_wave
           + (v3[school - 1] + v2)[:, None] + p.sigma_eps * rng.standard_normal((n, n_waves)))

    frame = pd.DataFrame({
        SCHOOL: np.repeat(school, n_waves),
        CHILD: np.repeat(child, n_waves),
        WAVE: np.tile(np.asarray(ANALYSIS_WAVES), n),
        'napz': napz.reshape(-1),
        'dep': dep.reshape(-1),
        'sdq': sdq.reshape(-1),
        'napz1': np.repeat(napz1, n_waves),
        'sex': np.repeat(sex, n_waves),
        'ses': np.repeat(ses, n_waves),
        'age': np.repeat(age, n_waves),
    })
    return LongDataset(frame, study_schema(), label=cfg.name)


def _response_predictors(data: LongDataset, exposure_wave: int):
    rows = data.frame[WAVE].to_numpy() == exposure_wave + 1
    napz_next = to_float_with_nan(data.frame.loc[rows, 'napz'])
    sdq = to_float_with_nan(data.frame.loc[rows, 'sdq'])
    return rows, napz_next, sdq


def expected_missing(zeta0: float, linear: np.ndarray) -> float:
    """Mean over children of P(R = 0)"""
    return float(np.mean(expit(-(zeta0 + linear))))


def _solve_intercept(linear: np.ndarray, target: float) -> float:
    if target <= 0.0:
        return math.inf
    if target >= 1.0:
        return -math.inf

    def gap(z0):
        return expected_missing(z0, linear) - target

    lo, hi = -CALIBRATION_BRACKET, CALIBRATION_BRACKET
    # SDQ sits near 16 so the root can lie well outside the nominal bracket
    while gap(lo) < 0:
        lo *= 2
        if lo < -1e8:
            raise ValueError(f'cannot bracket missingness intercept for target {target}')
    while gap(hi) > 0:
        hi *= 2
        if hi > 1e8:
            raise ValueError(f'cannot bracket missingness intercept for target {target}')
    return optimize.bisect(gap, lo, hi, xtol=CALIBRATION_TOL, maxiter=500)


def calibrate_missingness_intercepts(data: LongDataset, spec: MissingnessSpec,
                                     targets: Mapping[int, float]) -> Dict[int, float]:
    """
    Solve for zeta0 per exposure wave so the expected missing proportion equals the target

    Args:
        data: complete dataset
        spec: slopes (zeta1, zeta2)
        targets: exposure wave -> missing proportion

    Returns:
        exposure wave -> zeta0 (+inf for target 0, -inf for target 1)
    """
    intercepts = {}
    for wave in sorted(targets):
        _, napz_next, sdq = _response_predictors(data, wave)
        linear = spec.zeta1 * napz_next + spec.zeta2 * sdq
        if np.isnan(linear).any():
            raise ValueError(f'response predictors at wave {wave} must be complete')
        intercepts[wave] = _solve_intercept(linear, float(targets[wave]))
        logger.debug(f'zeta0[{wave}] = {intercepts[wave]:.6f} for target {targets[wave]:.3f}')
    return intercepts


def impose_missingness(data: LongDataset, spec: MissingnessSpec, cfg: ScenarioConfig,
                       rng: np.random.Generator) -> LongDataset:
    """
    Delete exposure cells by the logistic response model and SES by simple random sampling

    The response probability references only the next-wave outcome and the concurrent SDQ,
    both fully observed.
    """
    dep = data.column_with_nan('dep')
    for wave in EXPOSURE_WAVES:
        rows, napz_next, sdq = _response_predictors(data, wave)
        zeta0 = spec.zeta0.get(wave, math.inf)
        p_observed = expit(zeta0 + spec.zeta1 * napz_next + spec.zeta2 * sdq)
        observed = rng.uniform(size=p_observed.size) < p_observed
        column = dep[rows]
        column[~observed] = np.nan
        dep[rows] = column
        logger.debug(f'wave {wave}: realized missing proportion {1 - observed.mean():.3f}')

    n_child = data.n_rows // len(data.schema.waves)
    n_ses = int(round(cfg.ses_mcar_rate * n_child))
    ses = data.column_with_nan('ses').reshape(n_child, -1)
    ses[rng.choice(n_child, size=n_ses, replace=False), :] = np.nan
    return data.with_values({'dep': dep, 'ses': ses.reshape(-1)}, label=f'{data.label}:amputed')
