"""
SMC Imputers - Substantive-model-compatible imputation of dep and ses by Metropolis-within-Gibbs

All three samplers share one kernel: each missing covariate cell is proposed from its covariate-model
full conditional and accepted with the substantive-model likelihood ratio (plus the likelihood of any
downstream covariate model that uses the cell).
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from mlmi_bench.lib.bayes_draws import (ImputationError, check_full_rank, draw_inverse_gamma,
                                        draw_inverse_wishart)
from mlmi_bench.lib.data_model import SCHOOL, WAVE, LongDataset, build_dummy_indicators, to_array
from mlmi_bench.lib.dgp import AnalysisModel
from mlmi_bench.lib.imputers_conventional import (ImputationConfig, ImputedSet, SamplerDiagnostics,
                                                  save_schedule)
from mlmi_bench.lib.lmm import GROUPINGS, LmmSpec, Term, gaussian_loglik

logger = logging.getLogger(__name__)

__all__ = ['SubstantiveModelSpec', 'CovariateModel', 'CovariateModelPlan', 'SamplerDiagnostics', 'mh_step', 'psr',
           'impute_smc_jm_2l_di', 'impute_smc_sm_2l_di', 'impute_smc_jm_3l']

PRIOR_SHAPE = 0.001
PRIOR_RATE = 0.001
LOW_ACCEPTANCE = 0.01
LOW_ACCEPTANCE_WINDOW = 200
MIN_PSR_LENGTH = 10

INCOMPLETE_COVARIATES = ('dep', 'ses')
ROW_PREDICTORS = ('sdq', 'wave', 'napz1', 'sex', 'age')
CHILD_PREDICTORS = ('napz1', 'sex', 'age')
FAMILIES = ('normal-glm', 'two-level-lmm', 'three-level-lmm')


@dataclass(frozen=True)
class SubstantiveModelSpec:
    """
    One of the three analysis models

    model1 interacts dep with wave, model2 dep with ses, model3 adds dep^2. Term order follows
    beta1..beta7: dep, wave, interaction, napz1, sex, ses, age.
    """
    model: AnalysisModel
    response: str = 'napz'
    exposure: str = 'dep'
    confounders: Tuple[str, ...] = ('napz1', 'sex', 'ses', 'age')
    random_intercepts: Tuple[str, ...] = GROUPINGS

    def __post_init__(self):
        object.__setattr__(self, 'model', AnalysisModel(self.model))

    @classmethod
    def for_model(cls, model) -> 'SubstantiveModelSpec':
        return cls(AnalysisModel(model))

    @property
    def interaction(self) -> Term:
        if self.model == AnalysisModel.MODEL1:
            return Term.product(self.exposure, 'wave')
        if self.model == AnalysisModel.MODEL2:
            return Term.product(self.exposure, 'ses')
        return Term.square(self.exposure)

    @property
    def jav_column(self) -> Optional[str]:
        return {AnalysisModel.MODEL2: 'depxses', AnalysisModel.MODEL3: 'depsq'}.get(self.model)

    def terms(self, jav: bool = False) -> List[Term]:
        interaction = self.interaction
        if jav:
            if self.jav_column is None:
                raise ImputationError('no derived term needed: model1 interacts with the fully observed wave')
            interaction = Term.main(self.jav_column)
        return ([Term.main(self.exposure), Term.main('wave'), interaction]
                + [Term.main(c) for c in self.confounders])

    def lmm_spec(self, jav: bool = False, random_intercepts: Optional[Tuple[str, ...]] = None) -> LmmSpec:
        return LmmSpec(self.response, tuple(self.terms(jav)), random_intercepts or self.random_intercepts)

    def target_labels(self, jav: bool = False) -> Dict[str, str]:
        """Metric parameter name -> fitted column label"""
        terms = self.terms(jav)
        return {'beta1': terms[0].label, 'beta3': terms[2].label}


@dataclass(frozen=True)
class CovariateModel:
    target: str
    family: str
    predictors: Tuple[str, ...]
    cluster_means: str = 'manifest'

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f'unknown covariate model family {self.family!r}; choose from {FAMILIES}')
        if self.cluster_means not in ('latent', 'manifest'):
            raise ValueError(f'cluster_means must be latent or manifest, got {self.cluster_means!r}')


@dataclass(frozen=True)
class CovariateModelPlan:
    """Ordered univariate covariate models of a sequential factorization"""
    models: Tuple[CovariateModel, ...]

    def __post_init__(self):
        targets = self.order
        if sorted(targets) != sorted(set(targets)):
            raise ValueError(f'duplicate targets in covariate plan: {targets}')
        for model in self.models:
            if model.target == 'ses' and model.family == 'three-level-lmm':
                raise ValueError('ses is a child-level covariate; a three-level family does not apply')
            if model.target == 'dep' and model.family == 'normal-glm':
                raise ValueError('dep is repeated within child and needs a random-intercept family')

    @property
    def order(self) -> List[str]:
        return [m.target for m in self.models]

    def model(self, target: str) -> CovariateModel:
        for m in self.models:
            if m.target == target:
                return m
        raise KeyError(target)

    @classmethod
    def for_data(cls, data: LongDataset) -> 'CovariateModelPlan':
        """Ascending missingness order; each model conditions on the targets before it"""
        n_waves = len(data.schema.waves)
        rates = {
            'dep': float(np.isnan(data.column_with_nan('dep')).mean()),
            'ses': float(np.isnan(data.column_with_nan('ses')[::n_waves]).mean()),
        }
        order = sorted(INCOMPLETE_COVARIATES, key=lambda t: (rates[t], t))
        models = []
        for idx, target in enumerate(order):
            earlier = tuple(order[:idx])
            if target == 'dep':
                models.append(CovariateModel('dep', 'two-level-lmm', ROW_PREDICTORS + earlier))
            else:
                models.append(CovariateModel('ses', 'normal-glm', CHILD_PREDICTORS + earlier))
        return cls(tuple(models))


def mh_step(current: np.ndarray, proposal: np.ndarray, loglik_sub: Callable[[np.ndarray], np.ndarray],
            rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Independence Metropolis-Hastings step, elementwise

    Accepts each proposal with probability min(1, exp(loglik_sub(proposal) - loglik_sub(current))).
    A non-finite loglik at the proposal always rejects; at the current value always accepts.

    Returns:
        (accepted values, boolean acceptance mask)
    """
    current = np.asarray(current, dtype=float)
    proposal = np.asarray(proposal, dtype=float)
    ll_current = np.asarray(loglik_sub(current), dtype=float)
    ll_proposal = np.asarray(loglik_sub(proposal), dtype=float)
    log_u = np.log(rng.uniform(size=current.shape))
    with np.errstate(invalid='ignore'):
        accept = log_u < ll_proposal - ll_current
    accept = np.where(np.isfinite(ll_current), accept, True)
    accept = np.where(np.isfinite(ll_proposal), accept, False)
    return np.where(accept, proposal, current), accept


def psr(chains) -> float:
    """
    Gelman-Rubin potential scale reduction for one parameter

    Args:
        chains: (n_chains, n) array of equal-length draws

    Returns:
        sqrt(((n - 1) / n W + B / n) / W); 1.0 when W = B = 0
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f'psr needs at least 2 chains, got shape {x.shape}')
    n = x.shape[1]
    if n < MIN_PSR_LENGTH:
        raise ValueError(f'psr needs chains of length >= {MIN_PSR_LENGTH}, got {n}')
    within = float(x.var(axis=1, ddof=1).mean())
    between = n * float(x.mean(axis=1).var(ddof=1))
    if within == 0.0:
        return 1.0 if between == 0.0 else math.inf
    return math.sqrt(((n - 1) / n * within + between / n) / within)


class _LongProblem:
    """Fixed arrays of a balanced long panel whose only incomplete covariates are dep and ses"""

    def __init__(self, data: LongDataset, spec: SubstantiveModelSpec):
        frame = data.frame
        self.data = data
        self.spec = spec
        self.n_waves = len(data.schema.waves)
        unsupported = [n for n in data.incomplete_columns() if n not in INCOMPLETE_COVARIATES]
        if unsupported:
            raise ImputationError(f'SMC samplers impute dep and ses only; also incomplete: {unsupported}')
        self.y = to_array(frame, [spec.response])[:, 0]
        self.n = len(self.y)
        self.n_child = self.n // self.n_waves
        self.fixed = {name: to_array(frame, [name])[:, 0] for name in ('sdq', 'napz1', 'sex', 'age')}
        self.fixed['wave'] = frame[WAVE].to_numpy(dtype=float)
        self.child_code = np.arange(self.n) // self.n_waves
        self.slot = np.tile(np.arange(self.n_waves), self.n_child)
        school = frame[SCHOOL].to_numpy()
        _, school_code = np.unique(school, return_inverse=True)
        self.school_code = np.asarray(school_code).reshape(-1)
        self.school_of_child = self.school_code[::self.n_waves]
        self.dep = data.column_with_nan('dep')
        self.ses = data.column_with_nan('ses')[::self.n_waves]
        self.dep_missing = np.isnan(self.dep)
        self.ses_missing = np.isnan(self.ses)
        self.dep_rows_by_slot = [np.flatnonzero(self.dep_missing & (self.slot == s)) for s in range(self.n_waves)]
        self.ses_children = np.flatnonzero(self.ses_missing)
        dummies = build_dummy_indicators(school)
        self.row_dummies = dummies.entries
        self.dummy_labels = list(dummies.column_labels)
        self.child_dummies = self.row_dummies[::self.n_waves]

    @property
    def complete(self) -> bool:
        return not self.dep_missing.any() and not self.ses_missing.any()

    def child_rows(self, children: np.ndarray) -> np.ndarray:
        return (children[:, None] * self.n_waves + np.arange(self.n_waves)[None, :]).reshape(-1)

    def row_design(self, names: Sequence[str], rows=slice(None)) -> np.ndarray:
        return np.column_stack([np.ones(len(self.y[rows]))] + [self.fixed[n][rows] for n in names])

    def child_design(self, names: Sequence[str], children=slice(None)) -> np.ndarray:
        first = np.arange(self.n_child) * self.n_waves
        return np.column_stack([np.ones(self.n_child)] + [self.fixed[n][first] for n in names])[children]

    def initial_fill(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        dep, ses = self.dep.copy(), self.ses.copy()
        for values, missing, name in ((dep, self.dep_missing, 'dep'), (ses, self.ses_missing, 'ses')):
            if missing.any():
                observed = values[~missing]
                if observed.size == 0:
                    raise ImputationError(f'column {name!r} has no observed values')
                values[missing] = rng.choice(observed, size=int(missing.sum()), replace=True)
        return dep, ses

    def completed(self, dep: np.ndarray, ses: np.ndarray, index: int) -> LongDataset:
        return self.data.with_values({'dep': dep, 'ses': ses[self.child_code]},
                                     label=f'{self.data.label}:imp{index}')


class _NestedRegression:
    """
    y = X beta + a[child] + c[school] + e with flat beta and IG(0.001, 0.001) variance priors

    Either random intercept may be switched off; codes index the rows this model is fitted to.
    """

    def __init__(self, child_code: np.ndarray, school_code: np.ndarray, use_child: bool, use_school: bool,
                 scale: float = 1.0):
        self.child_code = child_code
        self.school_code = school_code
        self.use_child = use_child
        self.use_school = use_school
        self.n_child = int(child_code.max()) + 1
        self.n_school = int(school_code.max()) + 1
        self.child_counts = np.bincount(child_code, minlength=self.n_child).astype(float)
        self.school_counts = np.bincount(school_code, minlength=self.n_school).astype(float)
        self.beta: Optional[np.ndarray] = None
        self.a = np.zeros(self.n_child)
        self.c = np.zeros(self.n_school)
        self.s1 = max(scale, 1e-4)
        self.s2 = 0.1 * self.s1 if use_child else 0.0
        self.s3 = 0.1 * self.s1 if use_school else 0.0
        self._checked = False

    def effects(self, rows=slice(None)) -> np.ndarray:
        out = np.zeros(len(self.child_code[rows]))
        if self.use_child:
            out = out + self.a[self.child_code[rows]]
        if self.use_school:
            out = out + self.c[self.school_code[rows]]
        return out

    def mean(self, X: np.ndarray, rows=slice(None)) -> np.ndarray:
        return X @ self.beta + self.effects(rows)

    def loglik(self, y: np.ndarray, X: np.ndarray, rows=slice(None)) -> np.ndarray:
        return gaussian_loglik(y, self.mean(X, rows), self.s1)

    def update(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator, labels: Sequence[str] = None,
               child_extra: Optional[Tuple[np.ndarray, np.ndarray]] = None):
        """
        One Gibbs sweep: beta, child intercepts, school intercepts, then the variances

        child_extra adds (precision, linear) terms to the child-intercept conditional when another
        model uses the intercepts as a latent predictor.
        """
        if not self._checked:
            check_full_rank(X, labels)
            self._checked = True
        q, r = linalg.qr(X, mode='economic')
        resid = y - self.effects()
        self.beta = (linalg.solve_triangular(r, q.T @ resid)
                     + math.sqrt(self.s1) * linalg.solve_triangular(r, rng.standard_normal(X.shape[1])))
        e = y - X @ self.beta
        if self.use_child:
            other = self.c[self.school_code] if self.use_school else 0.0
            sums = np.bincount(self.child_code, weights=e - other, minlength=self.n_child)
            precision = self.child_counts / self.s1 + 1.0 / self.s2
            linear = sums / self.s1
            if child_extra is not None:
                precision = precision + child_extra[0]
                linear = linear + child_extra[1]
            self.a = linear / precision + rng.standard_normal(self.n_child) / np.sqrt(precision)
            self.s2 = draw_inverse_gamma(PRIOR_SHAPE + self.n_child / 2.0, PRIOR_RATE + float(self.a @ self.a) / 2.0,
                                         rng)
        if self.use_school:
            other = self.a[self.child_code] if self.use_child else 0.0
            sums = np.bincount(self.school_code, weights=e - other, minlength=self.n_school)
            precision = self.school_counts / self.s1 + 1.0 / self.s3
            self.c = (sums / self.s1) / precision + rng.standard_normal(self.n_school) / np.sqrt(precision)
            self.s3 = draw_inverse_gamma(PRIOR_SHAPE + self.n_school / 2.0,
                                         PRIOR_RATE + float(self.c @ self.c) / 2.0, rng)
        resid = e - self.effects()
        self.s1 = draw_inverse_gamma(PRIOR_SHAPE + len(y) / 2.0, PRIOR_RATE + float(resid @ resid) / 2.0, rng)


class _SmcChain:
    """
    One Metropolis-within-Gibbs chain

    Subclasses supply the covariate models: parameter updates, proposal conditionals, and the
    log-likelihood of downstream covariate models that a candidate value enters.
    """
    three_level = False

    def __init__(self, problem: _LongProblem, cfg: ImputationConfig, rng: np.random.Generator):
        self.p = problem
        self.cfg = cfg
        self.rng = rng
        self.dep, self.ses = problem.initial_fill(rng)
        self.terms = problem.spec.terms()
        self.labels = ['(Intercept)'] + [t.label for t in self.terms]
        if not self.three_level:
            self.labels += problem.dummy_labels
        self.substantive = _NestedRegression(problem.child_code, problem.school_code, True, self.three_level,
                                             scale=float(np.var(problem.y)))
        self.accepted = {t: 0 for t in INCOMPLETE_COVARIATES}
        self.proposed = {t: 0 for t in INCOMPLETE_COVARIATES}
        # one acceptance rate per target per iteration
        self.rate_history: Dict[str, List[float]] = {t: [] for t in INCOMPLETE_COVARIATES}
        self._step_counts: Dict[str, List[int]] = {}

    def substantive_design(self, rows, dep_rows: np.ndarray, ses_rows: np.ndarray) -> np.ndarray:
        values = {n: self.p.fixed[n][rows] for n in ('wave', 'napz1', 'sex', 'age')}
        values['dep'] = dep_rows
        values['ses'] = ses_rows
        columns = [np.ones(len(dep_rows))] + [t.apply(values) for t in self.terms]
        if not self.three_level:
            columns.append(self.p.row_dummies[rows])
        return np.column_stack(columns)

    def substantive_loglik(self, rows, dep_rows: np.ndarray, ses_rows: np.ndarray) -> np.ndarray:
        X = self.substantive_design(rows, dep_rows, ses_rows)
        return self.substantive.loglik(self.p.y[rows], X, rows)

    # covariate-model hooks
    def update_covariate_models(self):
        raise NotImplementedError

    def dep_proposal(self, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def ses_proposal(self, children: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def dep_downstream(self, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
        return np.zeros(len(rows))

    def ses_downstream(self, children: np.ndarray, values: np.ndarray) -> np.ndarray:
        return np.zeros(len(children))

    def step(self):
        p = self.p
        self._step_counts = {t: [0, 0] for t in INCOMPLETE_COVARIATES}
        X = self.substantive_design(slice(None), self.dep, self.ses[p.child_code])
        self.substantive.update(X, p.y, self.rng, self.labels)
        self.update_covariate_models()
        for rows in p.dep_rows_by_slot:
            if rows.size:
                self._update_dep(rows)
        if p.ses_children.size:
            self._update_ses(p.ses_children)
        for target, (accepted, proposed) in self._step_counts.items():
            if proposed:
                self.rate_history[target].append(accepted / proposed)

    def _update_dep(self, rows: np.ndarray):
        p = self.p
        mean, var = self.dep_proposal(rows)
        proposal = mean + np.sqrt(var) * self.rng.standard_normal(rows.size)
        ses_rows = self.ses[p.child_code[rows]]

        def loglik(values):
            return self.substantive_loglik(rows, values, ses_rows) + self.dep_downstream(rows, values)

        self.dep[rows], accepted = mh_step(self.dep[rows], proposal, loglik, self.rng)
        self._count('dep', accepted)

    def _update_ses(self, children: np.ndarray):
        p = self.p
        mean, var = self.ses_proposal(children)
        proposal = mean + np.sqrt(var) * self.rng.standard_normal(children.size)
        rows = p.child_rows(children)

        def loglik(values):
            ll = self.substantive_loglik(rows, self.dep[rows], np.repeat(values, p.n_waves))
            return ll.reshape(-1, p.n_waves).sum(axis=1) + self.ses_downstream(children, values)

        self.ses[children], accepted = mh_step(self.ses[children], proposal, loglik, self.rng)
        self._count('ses', accepted)

    def _count(self, target: str, accepted: np.ndarray):
        self.accepted[target] += int(accepted.sum())
        self.proposed[target] += int(accepted.size)
        counts = self._step_counts.setdefault(target, [0, 0])
        counts[0] += int(accepted.sum())
        counts[1] += int(accepted.size)

    def tracked(self) -> Dict[str, float]:
        s = self.substantive
        labels = self.p.spec.target_labels()
        values = {f'beta[{labels["beta1"]}]': float(s.beta[1]), f'beta[{labels["beta3"]}]': float(s.beta[3]),
                  'sigma1^2': s.s1, 'sigma2^2': s.s2}
        if self.three_level:
            values['sigma3^2'] = s.s3
        if self.p.dep_missing.any():
            values['mean[dep]'] = float(self.dep[self.p.dep_missing].mean())
        if self.p.ses_missing.any():
            values['mean[ses]'] = float(self.ses[self.p.ses_missing].mean())
        return values


class _JointTwoLevelChain(_SmcChain):
    """
    Joint covariate model: dep = Z alpha + u_child + e, with (ses - W gamma, u) bivariate normal per child
    (covariance Omega ~ IW(3, I)). School membership enters both Z and W as dummy indicators.
    """

    def __init__(self, problem: _LongProblem, cfg: ImputationConfig, rng: np.random.Generator):
        super().__init__(problem, cfg, rng)
        p = problem
        self.Z = np.column_stack([p.row_design(ROW_PREDICTORS), p.row_dummies])
        self.W = np.column_stack([p.child_design(CHILD_PREDICTORS), p.child_dummies])
        check_full_rank(self.Z, ['(Intercept)', *ROW_PREDICTORS] + p.dummy_labels)
        self.qz, self.rz = linalg.qr(self.Z, mode='economic')
        self.qw, self.rw = linalg.qr(self.W, mode='economic')
        self.alpha = linalg.solve_triangular(self.rz, self.qz.T @ self.dep)
        self.gamma = linalg.solve_triangular(self.rw, self.qw.T @ self.ses)
        self.s_e = max(float(np.var(self.dep - self.Z @ self.alpha)), 1e-4)
        self.u = np.zeros(p.n_child)
        self.omega = np.diag([max(float(np.var(self.ses - self.W @ self.gamma)), 1e-4), 0.1 * self.s_e])
        self.counts = np.full(p.n_child, float(p.n_waves))

    def update_covariate_models(self):
        p, rng = self.p, self.rng
        r = self.dep - self.u[p.child_code]
        self.alpha = (linalg.solve_triangular(self.rz, self.qz.T @ r)
                      + math.sqrt(self.s_e) * linalg.solve_triangular(self.rz, rng.standard_normal(self.Z.shape[1])))
        e = self.dep - self.Z @ self.alpha
        resid = e - self.u[p.child_code]
        self.s_e = draw_inverse_gamma(PRIOR_SHAPE + p.n / 2.0, PRIOR_RATE + float(resid @ resid) / 2.0, rng)
        w11, w12, w22 = self.omega[0, 0], self.omega[0, 1], self.omega[1, 1]
        slope, var = w12 / w22, w11 - w12 ** 2 / w22
        target = self.ses - slope * self.u
        self.gamma = (linalg.solve_triangular(self.rw, self.qw.T @ target)
                      + math.sqrt(var) * linalg.solve_triangular(self.rw, rng.standard_normal(self.W.shape[1])))
        r_ses = self.ses - self.W @ self.gamma
        prior_mean = (w12 / w11) * r_ses
        prior_var = w22 - w12 ** 2 / w11
        precision = 1.0 / prior_var + self.counts / self.s_e
        linear = prior_mean / prior_var + np.bincount(p.child_code, weights=e, minlength=p.n_child) / self.s_e
        self.u = linear / precision + rng.standard_normal(p.n_child) / np.sqrt(precision)
        stacked = np.column_stack([r_ses, self.u])
        self.omega = draw_inverse_wishart(3 + p.n_child, np.eye(2) + stacked.T @ stacked, rng)

    def dep_proposal(self, rows):
        return self.Z[rows] @ self.alpha + self.u[self.p.child_code[rows]], np.full(rows.size, self.s_e)

    def ses_proposal(self, children):
        w11, w12, w22 = self.omega[0, 0], self.omega[0, 1], self.omega[1, 1]
        mean = self.W[children] @ self.gamma + (w12 / w22) * self.u[children]
        return mean, np.full(children.size, w11 - w12 ** 2 / w22)


class _SequentialTwoLevelChain(_SmcChain):
    """
    Sequential covariate models in plan order: dep is a child random-intercept regression with school
    dummies, ses a normal regression on child-level predictors with school dummies
    """

    def __init__(self, problem: _LongProblem, cfg: ImputationConfig, rng: np.random.Generator,
                 plan: CovariateModelPlan):
        super().__init__(problem, cfg, rng)
        p = problem
        self.plan = plan
        self.dep_uses_ses = 'ses' in plan.model('dep').predictors
        self.ses_uses_dep = 'dep' in plan.model('ses').predictors
        self.dep_model = _NestedRegression(p.child_code, p.school_code, True, False,
                                           scale=float(np.nanvar(p.dep)))
        children = np.arange(p.n_child)
        self.ses_model = _NestedRegression(children, p.school_of_child, False, False,
                                           scale=float(np.nanvar(p.ses)))
        self.Z = np.column_stack([p.row_design(ROW_PREDICTORS), p.row_dummies])
        self.W = np.column_stack([p.child_design(CHILD_PREDICTORS), p.child_dummies])

    def dep_design(self, rows, ses_rows: np.ndarray) -> np.ndarray:
        if self.dep_uses_ses:
            return np.column_stack([self.Z[rows], ses_rows])
        return self.Z[rows]

    def ses_design(self, children, dep_means: np.ndarray) -> np.ndarray:
        if self.ses_uses_dep:
            return np.column_stack([self.W[children], dep_means])
        return self.W[children]

    def dep_means(self, dep: np.ndarray) -> np.ndarray:
        return dep.reshape(-1, self.p.n_waves).mean(axis=1)

    def update_covariate_models(self):
        p = self.p
        self.ses_model.update(self.ses_design(slice(None), self.dep_means(self.dep)), self.ses, self.rng)
        self.dep_model.update(self.dep_design(slice(None), self.ses[p.child_code]), self.dep, self.rng)

    def dep_proposal(self, rows):
        X = self.dep_design(rows, self.ses[self.p.child_code[rows]])
        return self.dep_model.mean(X, rows), np.full(rows.size, self.dep_model.s1)

    def ses_proposal(self, children):
        X = self.ses_design(children, self.dep_means(self.dep)[children])
        return self.ses_model.mean(X, children), np.full(children.size, self.ses_model.s1)

    def dep_downstream(self, rows, values):
        if not self.ses_uses_dep:
            return np.zeros(rows.size)
        p = self.p
        children = p.child_code[rows]
        sums = self.dep.reshape(-1, p.n_waves).sum(axis=1)[children]
        means = (sums - self.dep[rows] + values) / p.n_waves
        return self.ses_model.loglik(self.ses[children], self.ses_design(children, means), children)

    def ses_downstream(self, children, values):
        if not self.dep_uses_ses:
            return np.zeros(children.size)
        p = self.p
        rows = p.child_rows(children)
        ll = self.dep_model.loglik(self.dep[rows], self.dep_design(rows, np.repeat(values, p.n_waves)), rows)
        return ll.reshape(-1, p.n_waves).sum(axis=1)


class _ThreeLevelChain(_SmcChain):
    """
    Three-level substantive model without dummies

    dep: school and child random intercepts, regressed on ses and the row predictors.
    ses: school random intercept, regressed on child predictors and the child mean of dep, either the
    dep model's sampled child intercept ('latent') or the arithmetic mean over waves ('manifest').
    """
    three_level = True

    def __init__(self, problem: _LongProblem, cfg: ImputationConfig, rng: np.random.Generator):
        super().__init__(problem, cfg, rng)
        p = problem
        self.latent = cfg.cluster_means == 'latent'
        self.dep_model = _NestedRegression(p.child_code, p.school_code, True, True, scale=float(np.nanvar(p.dep)))
        self.ses_model = _NestedRegression(np.arange(p.n_child), p.school_of_child, False, True,
                                           scale=float(np.nanvar(p.ses)))
        self.Z = p.row_design(ROW_PREDICTORS)
        self.W = p.child_design(CHILD_PREDICTORS)

    def dep_design(self, rows, ses_rows: np.ndarray) -> np.ndarray:
        return np.column_stack([self.Z[rows], ses_rows])

    def cluster_means(self, children=slice(None), dep: Optional[np.ndarray] = None) -> np.ndarray:
        if self.latent:
            return self.dep_model.a[children]
        dep = self.dep if dep is None else dep
        return dep.reshape(-1, self.p.n_waves).mean(axis=1)[children]

    def ses_design(self, children, means: np.ndarray) -> np.ndarray:
        return np.column_stack([self.W[children], means])

    def update_covariate_models(self):
        p = self.p
        extra = None
        if self.latent and self.ses_model.beta is not None:
            kappa = self.ses_model.beta[-1]
            fixed = self.W @ self.ses_model.beta[:-1] + self.ses_model.c[p.school_of_child]
            extra = (np.full(p.n_child, kappa ** 2 / self.ses_model.s1),
                     kappa * (self.ses - fixed) / self.ses_model.s1)
        self.dep_model.update(self.dep_design(slice(None), self.ses[p.child_code]), self.dep, self.rng,
                              child_extra=extra)
        self.ses_model.update(self.ses_design(slice(None), self.cluster_means()), self.ses, self.rng)

    def dep_proposal(self, rows):
        X = self.dep_design(rows, self.ses[self.p.child_code[rows]])
        return self.dep_model.mean(X, rows), np.full(rows.size, self.dep_model.s1)

    def ses_proposal(self, children):
        X = self.ses_design(children, self.cluster_means(children))
        return self.ses_model.mean(X, children), np.full(children.size, self.ses_model.s1)

    def dep_downstream(self, rows, values):
        if self.latent:
            return np.zeros(rows.size)
        p = self.p
        children = p.child_code[rows]
        sums = self.dep.reshape(-1, p.n_waves).sum(axis=1)[children]
        means = (sums - self.dep[rows] + values) / p.n_waves
        return self.ses_model.loglik(self.ses[children], self.ses_design(children, means), children)

    def ses_downstream(self, children, values):
        p = self.p
        rows = p.child_rows(children)
        ll = self.dep_model.loglik(self.dep[rows], self.dep_design(rows, np.repeat(values, p.n_waves)), rows)
        return ll.reshape(-1, p.n_waves).sum(axis=1)


def _warn_low_acceptance(chain: _SmcChain, diagnostics: SamplerDiagnostics, warned: set, label: str):
    for target, history in chain.rate_history.items():
        if target in warned or len(history) < LOW_ACCEPTANCE_WINDOW:
            continue
        if float(np.mean(history[-LOW_ACCEPTANCE_WINDOW:])) < LOW_ACCEPTANCE:
            warned.add(target)
            diagnostics.warn(f'{label}: acceptance for {target} below {LOW_ACCEPTANCE} over '
                             f'{LOW_ACCEPTANCE_WINDOW} iterations')


def _run_chains(problem: _LongProblem, make_chain: Callable[[np.random.Generator], _SmcChain],
                cfg: ImputationConfig, label: str, gate_psr: bool) -> ImputedSet:
    """Run cfg.chains chains (at most m); imputation i comes from chain i % chains"""
    n_chains = min(max(cfg.chains, 1), cfg.m)
    if n_chains < cfg.chains:
        logger.debug(f'{label}: {cfg.chains} chains requested for m={cfg.m}; running {n_chains}')
    streams = np.random.SeedSequence(cfg.seed).spawn(n_chains)
    chains = [make_chain(np.random.default_rng(s)) for s in streams]
    counts = [len(range(c, cfg.m, n_chains)) for c in range(n_chains)]
    diagnostics = SamplerDiagnostics()
    snapshots: List[List[Tuple[np.ndarray, np.ndarray]]] = []
    traces: List[Dict[str, List[float]]] = []
    warned: set = set()
    for chain, count in zip(chains, counts):
        saves = set(save_schedule(cfg.burn_in, cfg.between, count))
        saved, trace = [], {}
        for it in range(1, max(saves) + 1):
            chain.step()
            for name, value in chain.tracked().items():
                trace.setdefault(name, []).append(value)
            if it in saves:
                saved.append((chain.dep.copy(), chain.ses.copy()))
            _warn_low_acceptance(chain, diagnostics, warned, label)
        snapshots.append(saved)
        traces.append(trace)

    for target in INCOMPLETE_COVARIATES:
        proposed = sum(c.proposed[target] for c in chains)
        if proposed:
            diagnostics.acceptance[target] = sum(c.accepted[target] for c in chains) / proposed
    diagnostics.trace_means = {name: np.asarray(values) for name, values in traces[0].items()}
    start, stop = cfg.burn_in // 2, cfg.burn_in
    if n_chains >= 2 and stop - start >= MIN_PSR_LENGTH:
        for name in traces[0]:
            window = np.asarray([t[name][start:stop] for t in traces])
            diagnostics.psr[name] = psr(window)
        worst = diagnostics.worst_psr()
        logger.debug(f'{label}: worst PSR {worst:.3f} over iterations {start + 1}-{stop}')
        if gate_psr and worst >= cfg.psr_threshold:
            diagnostics.psr_ok = False
            diagnostics.warn(f'{label}: worst PSR {worst:.3f} >= {cfg.psr_threshold} at end of burn-in')

    datasets = []
    for index in range(cfg.m):
        dep, ses = snapshots[index % n_chains][index // n_chains]
        datasets.append(problem.completed(dep, ses, index))
    return ImputedSet(datasets, diagnostics)


def _prepare(data: LongDataset, model) -> Optional[_LongProblem]:
    spec = model if isinstance(model, SubstantiveModelSpec) else SubstantiveModelSpec.for_model(model)
    problem = _LongProblem(data, spec)
    return None if problem.complete else problem


def impute_smc_jm_2l_di(data: LongDataset, model, cfg: ImputationConfig) -> ImputedSet:
    """
    SMC imputation with a joint two-level covariate model and a two-level substantive model
    (school dummies, child random intercept)

    Args:
        data: long dataset with dep and/or ses incomplete
        model: SubstantiveModelSpec or AnalysisModel
        cfg: m, burn_in, between, chains, seed

    Returns:
        ImputedSet of LongDatasets
    """
    problem = _prepare(data, model)
    if problem is None:
        return ImputedSet([data] * cfg.m)
    return _run_chains(problem, lambda rng: _JointTwoLevelChain(problem, cfg, rng), cfg, 'SMC-JM-2L-DI',
                       gate_psr=False)


def impute_smc_sm_2l_di(data: LongDataset, model, plan: Optional[CovariateModelPlan], cfg: ImputationConfig
                        ) -> ImputedSet:
    """SMC sequential modelling: substantive model times univariate covariate models in plan order"""
    problem = _prepare(data, model)
    if problem is None:
        return ImputedSet([data] * cfg.m)
    plan = plan or CovariateModelPlan.for_data(data)
    if sorted(plan.order) != sorted(INCOMPLETE_COVARIATES):
        raise ImputationError(f'covariate plan must order {INCOMPLETE_COVARIATES}, got {plan.order}')
    return _run_chains(problem, lambda rng: _SequentialTwoLevelChain(problem, cfg, rng, plan), cfg,
                       'SMC-SM-2L-DI', gate_psr=False)


def impute_smc_jm_3l(data: LongDataset, model, cfg: ImputationConfig) -> ImputedSet:
    """
    SMC imputation under the three-level substantive model with school and child random intercepts

    Worst PSR at the end of burn-in >= cfg.psr_threshold flags the run (diagnostics.psr_ok = False).
    """
    problem = _prepare(data, model)
    if problem is None:
        return ImputedSet([data] * cfg.m)
    return _run_chains(problem, lambda rng: _ThreeLevelChain(problem, cfg, rng), cfg, 'SMC-JM-3L',
                       gate_psr=True)
