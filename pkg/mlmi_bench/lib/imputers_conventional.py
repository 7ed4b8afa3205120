"""
Conventional Imputers - Wide-format JM / FCS imputation with dummy indicators or school random effects,
plus JAV and passive variants
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from mlmi_bench.lib.bayes_draws import (ImputationError, check_full_rank, draw_inverse_gamma,
                                        draw_inverse_wishart, draw_missing_rows, draw_mvn_regression,
                                        draw_normal_regression, draw_scaled_inv_chi2)
from mlmi_bench.lib.data_model import (SCHOOL, Column, Level, LongDataset, Role, WideDataset,
                                       build_dummy_indicators, reshape_long)
from mlmi_bench.lib.dgp import AnalysisModel
from mlmi_bench.lib.lmm import Term

logger = logging.getLogger(__name__)

__all__ = ['ImputationError', 'ImputationConfig', 'ImputedSet', 'SamplerDiagnostics', 'Variant',
           'impute_jm_1l_di_wide', 'impute_fcs_1l_di_wide', 'impute_jm_2l_wide', 'impute_fcs_2l_wide',
           'derive_jav_columns', 'passive_predictor_plan']

# (burn_in, between) per sampler family; FCS uses burn_in as the number of cycles per chain
SAMPLER_DEFAULTS: Dict[str, Dict[str, Tuple[int, int]]] = {
    'paper': {'JM': (1000, 100), 'FCS': (10, 0), 'SMC-JM-2L': (500, 10), 'SMC-SM': (1000, 100),
              'SMC-JM-3L': (2500, 100)},
    'desk': {'JM': (500, 50), 'FCS': (5, 0), 'SMC-JM-2L': (250, 5), 'SMC-SM': (500, 50),
             'SMC-JM-3L': (500, 20)},
}
PRESET_M = {'paper': 20, 'desk': 10}

EXPOSURE_FOR_OUTCOME = {'dep2': 'napz3', 'dep4': 'napz5', 'dep6': 'napz7'}


class Variant(str, Enum):
    PLAIN = 'plain'
    JAV = 'jav'
    PASSIVE_C = 'passive_c'
    PASSIVE_ALL = 'passive_all'
    PASSIVE = 'passive'  # model3: squares recomputed each cycle


@dataclass(frozen=True)
class ImputationConfig:
    """Sampler settings for one imputation run"""
    m: int = 20
    burn_in: int = 1000
    between: int = 100
    seed: int = 0
    variant: Variant = Variant.PLAIN
    pan_iterations: int = 20
    chains: int = 2
    cluster_means: str = 'latent'
    psr_threshold: float = 1.10

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f'm must be >= 2, got {self.m}')
        if self.burn_in < 0 or self.between < 0:
            raise ValueError('burn_in and between must be non-negative')
        object.__setattr__(self, 'variant', Variant(self.variant))
        if self.cluster_means not in ('latent', 'manifest'):
            raise ValueError(f'cluster_means must be latent or manifest, got {self.cluster_means!r}')

    @classmethod
    def for_family(cls, family: str, preset: str = 'paper', **overrides) -> 'ImputationConfig':
        burn_in, between = SAMPLER_DEFAULTS[preset][family]
        settings = dict(m=PRESET_M[preset], burn_in=burn_in, between=between)
        settings.update(overrides)
        return cls(**settings)

    def with_seed(self, seed: int) -> 'ImputationConfig':
        return replace(self, seed=int(seed))


@dataclass
class SamplerDiagnostics:
    """Per-run sampler summaries: traces, PSR per parameter, MH acceptance per target column"""
    trace_means: Dict[str, np.ndarray] = field(default_factory=dict)
    parameter_traces: Dict[str, np.ndarray] = field(default_factory=dict)
    psr: Dict[str, float] = field(default_factory=dict)
    acceptance: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    psr_ok: bool = True

    def warn(self, message: str):
        logger.warning(message)
        self.warnings.append(message)

    def worst_psr(self) -> float:
        finite = [v for v in self.psr.values() if np.isfinite(v)]
        return max(finite) if finite else float('nan')

    def rows(self, method: str) -> List[Dict[str, object]]:
        """Rows for the diagnostics CSV"""
        names = sorted(set(self.psr) | set(self.acceptance))
        return [{'method': method, 'parameter': name, 'psr': self.psr.get(name, float('nan')),
                 'acceptance_rate': self.acceptance.get(name, float('nan'))} for name in names]


@dataclass
class ImputedSet:
    """m completed datasets (all observed cells identical to the input)"""
    datasets: List[Union[WideDataset, LongDataset]]
    diagnostics: SamplerDiagnostics = field(default_factory=SamplerDiagnostics)

    @property
    def m(self) -> int:
        return len(self.datasets)

    def to_long(self) -> List[LongDataset]:
        return [d if isinstance(d, LongDataset) else reshape_long(d) for d in self.datasets]


def _model_of(model) -> AnalysisModel:
    return AnalysisModel(getattr(model, 'model', model))


def derive_jav_columns(data: WideDataset, model) -> WideDataset:
    """
    Append the derived interaction (model2: dep x ses) or square (model3: dep^2) columns per wave

    Cells are missing wherever a parent is missing; imputers then treat them as ordinary columns.
    """
    model = _model_of(model)
    if model == AnalysisModel.MODEL1:
        raise ImputationError('no derived term needed: the model1 interaction partner (wave) is fully observed')
    dep = data.schema.column('dep')
    if model == AnalysisModel.MODEL2:
        column = Column('depxses', Role.DERIVED, Level.TIME_VARYING, dep.lag, ('product', ('dep', 'ses')))
    else:
        column = Column('depsq', Role.DERIVED, Level.TIME_VARYING, dep.lag, ('square', ('dep',)))
    schema = data.schema.with_column(column)
    ses = data.column_with_nan('ses')
    updates = {}
    for k in schema.waves:
        parents = {'dep': data.column_with_nan(dep.wide_name(k)), 'ses': ses}
        updates[column.wide_name(k)] = column.evaluate(parents)
    frame = data.frame.copy()
    for name in updates:
        frame[name] = np.nan
    return WideDataset(frame, schema, data.label).with_values(updates)


def passive_predictor_plan(variant: Variant, model) -> Dict[str, List[Term]]:
    """
    Derived predictor terms per incomplete column, recomputed from current imputations at every visit

    Args:
        variant: passive_c or passive_all (model2), passive (model3)
        model: analysis model

    Returns:
        target wide column -> list of derived terms over wide column names
    """
    model = _model_of(model)
    variant = Variant(variant)
    if model == AnalysisModel.MODEL1:
        raise ImputationError('passive imputation is only defined for model2 and model3')
    plan: Dict[str, List[Term]] = {}
    if model == AnalysisModel.MODEL2:
        if variant not in (Variant.PASSIVE_C, Variant.PASSIVE_ALL):
            raise ImputationError(f'model2 passive variants are passive_c / passive_all, got {variant.value}')
        for dep, napz in EXPOSURE_FOR_OUTCOME.items():
            if variant == Variant.PASSIVE_C:
                plan[dep] = [Term.product(napz, 'ses')]
            else:
                plan[dep] = [Term.product(n, 'ses') for n in EXPOSURE_FOR_OUTCOME.values()]
        plan['ses'] = [Term.product(napz, dep) for dep, napz in EXPOSURE_FOR_OUTCOME.items()]
        return plan
    if variant != Variant.PASSIVE:
        raise ImputationError(f'model3 has a single passive variant, got {variant.value}')
    for dep in EXPOSURE_FOR_OUTCOME:
        plan[dep] = [Term.square(other) for other in EXPOSURE_FOR_OUTCOME if other != dep]
    plan['ses'] = [Term.square(dep) for dep in EXPOSURE_FOR_OUTCOME]
    return plan


class _WideProblem:
    """Current values, masks and fixed predictors of a wide imputation problem"""

    def __init__(self, data: WideDataset, with_dummies: bool):
        self.data = data
        self.names = data.value_names
        self.values = np.column_stack([data.column_with_nan(n) for n in self.names])
        self.mask = np.isnan(self.values)
        self.incomplete = [n for i, n in enumerate(self.names) if self.mask[:, i].any()]
        self.complete = [n for n in self.names if n not in self.incomplete]
        self.school = data.frame[SCHOOL].to_numpy()
        _, self.school_code = np.unique(self.school, return_inverse=True)
        self.school_code = np.asarray(self.school_code).reshape(-1)
        self.n_school = int(self.school_code.max()) + 1
        dummies = build_dummy_indicators(self.school) if with_dummies else None
        self.dummies = dummies.entries if dummies is not None else np.zeros((len(self.school), 0))
        self.dummy_labels = list(dummies.column_labels) if dummies is not None else []

    def col(self, name: str) -> int:
        return self.names.index(name)

    def fixed_design(self) -> Tuple[np.ndarray, List[str]]:
        X = np.column_stack([np.ones(len(self.values))] + [self.values[:, self.col(n)] for n in self.complete]
                            + [self.dummies])
        return X, ['(Intercept)'] + self.complete + self.dummy_labels

    def initial_fill(self, values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Random draws from each column's observed values"""
        out = values.copy()
        for name in self.incomplete:
            j = self.col(name)
            observed = values[~self.mask[:, j], j]
            n_mis = int(self.mask[:, j].sum())
            if observed.size == 0:
                raise ImputationError(f'column {name!r} has no observed values')
            out[self.mask[:, j], j] = rng.choice(observed, size=n_mis, replace=True)
        return out

    def visit_order(self) -> List[str]:
        rates = {n: self.mask[:, self.col(n)].mean() for n in self.incomplete}
        return sorted(self.incomplete, key=lambda n: (rates[n], self.names.index(n)))

    def completed(self, values: np.ndarray, index: int) -> WideDataset:
        updates = {n: values[:, self.col(n)] for n in self.incomplete}
        return self.data.with_values(updates, label=f'{self.data.label}:imp{index}')

    def trace(self, values: np.ndarray) -> Dict[str, float]:
        return {n: float(values[self.mask[:, self.col(n)], self.col(n)].mean()) for n in self.incomplete}


def _passthrough(data, cfg: ImputationConfig) -> ImputedSet:
    return ImputedSet([data] * cfg.m)


def _record(traces: Dict[str, List[float]], snapshot: Dict[str, float]):
    for name, value in snapshot.items():
        traces.setdefault(name, []).append(value)


def save_schedule(burn_in: int, between: int, count: int) -> List[int]:
    """Iteration numbers (1-based) after which an imputation is saved"""
    return [max(burn_in, 1) + i * max(between, 1) for i in range(count)]


def impute_jm_1l_di_wide(data: WideDataset, cfg: ImputationConfig) -> ImputedSet:
    """
    Single-level multivariate normal JM with school dummy indicators (one long chain)

    Args:
        data: wide dataset; incomplete columns form the multivariate response
        cfg: m, burn_in, between, seed

    Returns:
        ImputedSet of WideDatasets
    """
    problem = _WideProblem(data, with_dummies=True)
    if not problem.incomplete:
        return _passthrough(data, cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    X, labels = problem.fixed_design()
    check_full_rank(X, labels)
    cols = [problem.col(n) for n in problem.incomplete]
    mask = problem.mask[:, cols]
    values = problem.initial_fill(problem.values, rng)
    saves = set(save_schedule(cfg.burn_in, cfg.between, cfg.m))
    datasets, traces = [], {}
    for it in range(1, max(saves) + 1):
        Y = values[:, cols]
        B, Sigma = draw_mvn_regression(X, Y, rng, labels=labels)
        values[:, cols] = draw_missing_rows(Y, mask, X @ B, Sigma, rng)
        _record(traces, problem.trace(values))
        if it in saves:
            datasets.append(problem.completed(values, len(datasets)))
    return ImputedSet(datasets, SamplerDiagnostics(trace_means={k: np.asarray(v) for k, v in traces.items()}))


def _school_effects(E: np.ndarray, school_code: np.ndarray, n_school: int, Sigma: np.ndarray, Psi: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw school random-effect vectors b_s | residuals E = Y - XB for all schools at once"""
    q = E.shape[1]
    counts = np.bincount(school_code, minlength=n_school).astype(float)
    sums = np.zeros((n_school, q))
    np.add.at(sums, school_code, E)
    sigma_inv = linalg.inv(Sigma)
    psi_inv = linalg.inv(Psi)
    precision = psi_inv[None, :, :] + counts[:, None, None] * sigma_inv[None, :, :]
    cov = np.linalg.inv(precision)
    mean = np.einsum('sij,sj->si', cov, sums @ sigma_inv)
    chol = np.linalg.cholesky(0.5 * (cov + np.transpose(cov, (0, 2, 1))))
    return mean + np.einsum('sij,sj->si', chol, rng.standard_normal((n_school, q)))


def impute_jm_2l_wide(data: WideDataset, cfg: ImputationConfig) -> ImputedSet:
    """
    Two-level multivariate LMM JM: school random-effect vectors replace the dummy indicators

    Gibbs order per iteration: B, school effects b_s, Psi, Sigma, missing cells.
    """
    problem = _WideProblem(data, with_dummies=False)
    if not problem.incomplete:
        return _passthrough(data, cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    X, labels = problem.fixed_design()
    check_full_rank(X, labels)
    n, p = X.shape
    cols = [problem.col(n) for n in problem.incomplete]
    q = len(cols)
    mask = problem.mask[:, cols]
    values = problem.initial_fill(problem.values, rng)
    qx, rx = linalg.qr(X, mode='economic')
    Sigma = np.cov(values[:, cols], rowvar=False).reshape(q, q) + 1e-6 * np.eye(q)
    Psi = 0.1 * np.diag(np.diag(Sigma))
    b = np.zeros((problem.n_school, q))
    saves = set(save_schedule(cfg.burn_in, cfg.between, cfg.m))
    datasets, traces, psi_trace = [], {}, []
    for it in range(1, max(saves) + 1):
        Y = values[:, cols]
        R = Y - b[problem.school_code]
        B_hat = linalg.solve_triangular(rx, qx.T @ R)
        B = B_hat + linalg.solve_triangular(rx, rng.standard_normal((p, q))) @ np.linalg.cholesky(Sigma).T
        E = Y - X @ B
        b = _school_effects(E, problem.school_code, problem.n_school, Sigma, Psi, rng)
        Psi = draw_inverse_wishart(q + 1 + problem.n_school, np.eye(q) + b.T @ b, rng)
        resid = E - b[problem.school_code]
        Sigma = draw_inverse_wishart(q + 1 + n, np.eye(q) + resid.T @ resid, rng)
        values[:, cols] = draw_missing_rows(Y, mask, X @ B + b[problem.school_code], Sigma, rng)
        _record(traces, problem.trace(values))
        psi_trace.append(np.diag(Psi).copy())
        if it in saves:
            datasets.append(problem.completed(values, len(datasets)))
    psi_trace = np.asarray(psi_trace)
    diagnostics = SamplerDiagnostics(
        trace_means={k: np.asarray(v) for k, v in traces.items()},
        parameter_traces={f'Psi[{name}]': psi_trace[:, i] for i, name in enumerate(problem.incomplete)})
    return ImputedSet(datasets, diagnostics)


@dataclass
class _PanState:
    beta: np.ndarray
    b: np.ndarray
    tau2: float
    sigma2: float


def _pan_visit(X: np.ndarray, y: np.ndarray, observed: np.ndarray, school_code: np.ndarray, n_school: int,
               state: Optional[_PanState], iterations: int, rng: np.random.Generator,
               labels: Sequence[str]) -> Tuple[np.ndarray, _PanState]:
    """Univariate two-level Gibbs sweeps on the observed rows, then draws for the missing rows"""
    Xo, yo, so = X[observed], y[observed], school_code[observed]
    check_full_rank(Xo, labels)
    qx, rx = linalg.qr(Xo, mode='economic')
    counts = np.bincount(so, minlength=n_school).astype(float)
    if state is None or state.beta.shape[0] != X.shape[1]:
        beta = linalg.solve_triangular(rx, qx.T @ yo)
        resid = yo - Xo @ beta
        state = _PanState(beta, np.zeros(n_school), max(float(resid.var()) * 0.1, 1e-4), max(float(resid.var()), 1e-4))
    beta, b, tau2, sigma2 = state.beta, state.b, state.tau2, state.sigma2
    for _ in range(iterations):
        r = yo - b[so]
        beta = (linalg.solve_triangular(rx, qx.T @ r)
                + np.sqrt(sigma2) * linalg.solve_triangular(rx, rng.standard_normal(X.shape[1])))
        e = yo - Xo @ beta
        sums = np.bincount(so, weights=e, minlength=n_school)
        precision = counts / sigma2 + 1.0 / tau2
        b = (sums / sigma2) / precision + rng.standard_normal(n_school) / np.sqrt(precision)
        # IW(2, 1) prior on the 1 x 1 school covariance
        tau2 = draw_inverse_gamma((2 + n_school) / 2.0, (1.0 + float(b @ b)) / 2.0, rng)
        resid = e - b[so]
        sigma2 = draw_scaled_inv_chi2(float(resid @ resid), int(observed.sum()), rng)
    missing = ~observed
    draws = X[missing] @ beta + b[school_code[missing]] + np.sqrt(sigma2) * rng.standard_normal(int(missing.sum()))
    return draws, _PanState(beta, b, tau2, sigma2)


def _fcs_chain(problem: _WideProblem, cfg: ImputationConfig, rng: np.random.Generator, two_level: bool,
               plan: Mapping[str, List[Term]]) -> Tuple[np.ndarray, Dict[str, List[float]]]:
    values = problem.initial_fill(problem.values, rng)
    order = problem.visit_order()
    states: Dict[str, _PanState] = {}
    traces: Dict[str, List[float]] = {}
    for _ in range(cfg.burn_in):
        for target in order:
            j = problem.col(target)
            others = [n for n in problem.names if n != target]
            derived = plan.get(target, [])
            columns = ([np.ones(len(values))] + [values[:, problem.col(n)] for n in others]
                       + [_term_values(term, problem, values) for term in derived])
            labels = ['(Intercept)'] + others + [t.label for t in derived]
            if not two_level:
                columns.append(problem.dummies)
                labels += problem.dummy_labels
            X = np.column_stack(columns)
            observed = ~problem.mask[:, j]
            y = values[:, j]
            if two_level:
                draws, states[target] = _pan_visit(X, y, observed, problem.school_code, problem.n_school,
                                                   states.get(target), cfg.pan_iterations, rng, labels)
            else:
                beta, sigma2 = draw_normal_regression(X[observed], y[observed], rng, labels)
                draws = X[~observed] @ beta + np.sqrt(sigma2) * rng.standard_normal(int((~observed).sum()))
            values[~observed, j] = draws
        _record(traces, problem.trace(values))
    return values, traces


def _term_values(term: Term, problem: _WideProblem, values: np.ndarray) -> np.ndarray:
    return term.apply({n: values[:, problem.col(n)] for n in term.parents})


def _impute_fcs(data: WideDataset, cfg: ImputationConfig, two_level: bool, model) -> ImputedSet:
    problem = _WideProblem(data, with_dummies=not two_level)
    if not problem.incomplete:
        return _passthrough(data, cfg)
    plan: Dict[str, List[Term]] = {}
    if cfg.variant in (Variant.PASSIVE_C, Variant.PASSIVE_ALL, Variant.PASSIVE):
        if model is None:
            raise ImputationError(f'variant {cfg.variant.value} needs the analysis model')
        plan = passive_predictor_plan(cfg.variant, model)
    elif cfg.variant == Variant.JAV and not any(c.role == Role.DERIVED for c in data.schema.columns):
        raise ImputationError('JAV variant expects derived columns; call derive_jav_columns first')
    datasets, traces = [], {}
    for index, seq in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.m)):
        values, chain_traces = _fcs_chain(problem, cfg, np.random.default_rng(seq), two_level, plan)
        datasets.append(problem.completed(values, index))
        if index == 0:
            traces = chain_traces
    return ImputedSet(datasets, SamplerDiagnostics(trace_means={k: np.asarray(v) for k, v in traces.items()}))


def impute_fcs_1l_di_wide(data: WideDataset, cfg: ImputationConfig, model=None) -> ImputedSet:
    """
    Chained Bayesian normal regressions with school dummy indicators; m independent chains of
    `burn_in` cycles each
    """
    return _impute_fcs(data, cfg, two_level=False, model=model)


def impute_fcs_2l_wide(data: WideDataset, cfg: ImputationConfig, model=None) -> ImputedSet:
    """Chained univariate two-level LMMs with a school random intercept (pan-style sweeps per visit)"""
    return _impute_fcs(data, cfg, two_level=True, model=model)
