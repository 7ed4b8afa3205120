"""
Tests for substantive-model-compatible imputation: MH step, PSR, covariate plans and the three samplers
"""
import math

import numpy as np
import pytest
from dataclasses import replace
from scipy import stats

from mlmi_bench.lib.analysis_pooling import analyse_imputed_set
from mlmi_bench.lib.bayes_draws import ImputationError
from mlmi_bench.lib.data_model import reshape_wide
from mlmi_bench.lib.dgp import AnalysisModel, true_values
from mlmi_bench.lib.imputers_conventional import ImputationConfig, impute_jm_1l_di_wide
from mlmi_bench.lib.imputers_smc import (LOW_ACCEPTANCE_WINDOW, CovariateModel, CovariateModelPlan,
                                         SubstantiveModelSpec, _JointTwoLevelChain, _NestedRegression, _prepare,
                                         impute_smc_jm_2l_di, impute_smc_jm_3l, impute_smc_sm_2l_di, mh_step, psr)

SAMPLERS = [
    lambda data, model, cfg: impute_smc_jm_2l_di(data, model, cfg),
    lambda data, model, cfg: impute_smc_sm_2l_di(data, model, None, cfg),
    lambda data, model, cfg: impute_smc_jm_3l(data, model, cfg),
]
SAMPLER_IDS = ['jm_2l_di', 'sm_2l_di', 'jm_3l']


class TestMetropolisStep:
    """Independence MH acceptance"""

    def test_equal_loglik_always_accepts(self):
        rng = np.random.default_rng(0)
        current, proposal = np.zeros(1000), np.ones(1000)
        values, accept = mh_step(current, proposal, lambda x: np.zeros_like(x), rng)
        assert accept.all()
        np.testing.assert_array_equal(values, proposal)

    def test_impossible_proposal_keeps_current(self):
        rng = np.random.default_rng(1)
        current, proposal = np.zeros(1000), np.ones(1000)
        values, accept = mh_step(current, proposal, lambda x: np.where(x > 0.5, -np.inf, 0.0), rng)
        assert not accept.any()
        np.testing.assert_array_equal(values, current)

    def test_impossible_current_moves(self):
        rng = np.random.default_rng(2)
        values, accept = mh_step(np.zeros(10), np.ones(10), lambda x: np.where(x < 0.5, -np.inf, -5.0), rng)
        assert accept.all()

    def test_acceptance_rate_matches_ratio(self):
        rng = np.random.default_rng(3)
        n = 20000
        values, accept = mh_step(np.zeros(n), np.ones(n), lambda x: -x * math.log(4.0), rng)
        assert abs(accept.mean() - 0.25) < 3 * math.sqrt(0.25 * 0.75 / n)

    @pytest.mark.slow
    def test_stationary_distribution_matches_exact_posterior(self):
        """
        Prior x ~ N(0, 1) proposes; y = 1.5 observed with y | x ~ N(x, 0.5) weights.
        The exact conditional is N(1.0, 1/3).
        """
        rng = np.random.default_rng(4)
        y, noise = 1.5, 0.5

        def loglik(x):
            return -0.5 * (y - x) ** 2 / noise

        chains = 2000
        state = rng.standard_normal(chains)
        kept = []
        for it in range(400):
            state, _ = mh_step(state, rng.standard_normal(chains), loglik, rng)
            if it >= 200:
                kept.append(state.copy())
        draws = np.concatenate(kept)
        last = kept[-1]
        mc_se = math.sqrt(1 / 3 / chains)
        assert abs(last.mean() - 1.0) < 3 * mc_se
        assert draws.var() == pytest.approx(1 / 3, rel=0.05)

    def test_discrete_target_stationary_and_reversible(self):
        """Uniform proposals over 5 states with target proportional to 1..5"""
        rng = np.random.default_rng(5)
        target = np.arange(1, 6) / 15.0

        def loglik(x):
            return np.log(target[x.astype(int)])

        chains = 50000
        state = rng.integers(0, 5, chains).astype(float)
        for _ in range(30):
            state, _ = mh_step(state, rng.integers(0, 5, chains).astype(float), loglik, rng)
        freq = np.bincount(state.astype(int), minlength=5) / chains
        assert np.all(np.abs(freq - target) < 4 * np.sqrt(target * (1 - target) / chains))

        start = rng.choice(5, size=chains, p=target).astype(float)
        end, _ = mh_step(start, rng.integers(0, 5, chains).astype(float), loglik, rng)
        flow = np.zeros((5, 5))
        np.add.at(flow, (start.astype(int), end.astype(int)), 1.0)
        for i in range(5):
            for j in range(i + 1, 5):
                assert abs(flow[i, j] - flow[j, i]) < 4 * math.sqrt(flow[i, j] + flow[j, i] + 1.0), (i, j)
                expected = chains * min(target[i], target[j]) / 5
                assert abs(flow[i, j] - expected) < 4 * math.sqrt(expected), (i, j)


class TestPsr:
    """Potential scale reduction"""

    def test_identical_constant_chains(self):
        assert psr(np.full((2, 50), 3.0)) == 1.0

    def test_same_distribution_near_one(self):
        rng = np.random.default_rng(0)
        assert psr(rng.standard_normal((2, 10000))) < 1.02

    def test_separated_chains(self):
        rng = np.random.default_rng(1)
        chains = rng.standard_normal((2, 1000)) + np.array([[0.0], [5.0]])
        assert psr(chains) > 1.1

    def test_constant_but_different_chains(self):
        assert psr(np.array([[0.0] * 20, [1.0] * 20])) == math.inf

    @pytest.mark.parametrize('shape', [(1, 100), (2, 9)])
    def test_rejects_short_input(self, shape):
        with pytest.raises(ValueError):
            psr(np.zeros(shape))


class TestModelSpecs:

    @pytest.mark.parametrize('model,label', [
        ('model1', 'dep:wave'),
        ('model2', 'dep:ses'),
        ('model3', 'dep^2'),
    ])
    def test_interaction_labels(self, model, label):
        spec = SubstantiveModelSpec.for_model(model)
        assert spec.target_labels() == {'beta1': 'dep', 'beta3': label}

    def test_model3_terms_include_square(self):
        labels = SubstantiveModelSpec.for_model('model3').lmm_spec().column_labels
        assert 'dep' in labels and 'dep^2' in labels

    def test_jav_uses_derived_column(self):
        assert SubstantiveModelSpec.for_model('model2').target_labels(jav=True)['beta3'] == 'depxses'
        with pytest.raises(ImputationError):
            SubstantiveModelSpec.for_model('model1').terms(jav=True)


class TestCovariatePlan:

    def test_ascending_missingness(self, amputed_data):
        plan = CovariateModelPlan.for_data(amputed_data)
        assert plan.order == ['ses', 'dep']
        assert plan.model('dep').family == 'two-level-lmm'
        assert 'ses' in plan.model('dep').predictors
        assert 'dep' not in plan.model('ses').predictors

    def test_duplicate_target(self):
        model = CovariateModel('ses', 'normal-glm', ('sex',))
        with pytest.raises(ValueError, match='duplicate'):
            CovariateModelPlan((model, model))

    def test_family_level_checks(self):
        with pytest.raises(ValueError):
            CovariateModelPlan((CovariateModel('ses', 'three-level-lmm', ()),))
        with pytest.raises(ValueError):
            CovariateModelPlan((CovariateModel('dep', 'normal-glm', ()),))

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            CovariateModel('dep', 'probit', ())

    def test_missing_target(self, amputed_data):
        with pytest.raises(KeyError):
            CovariateModelPlan.for_data(amputed_data).model('age')


class TestSamplers:
    """Shared contract of the three SMC samplers"""

    @pytest.mark.parametrize('sampler', SAMPLERS, ids=SAMPLER_IDS)
    def test_complete_data_passes_through(self, sampler, complete_data, quick_config):
        result = sampler(complete_data, AnalysisModel.MODEL1, quick_config)
        assert result.m == quick_config.m
        assert all(d is complete_data for d in result.datasets)

    @pytest.mark.parametrize('model', ['model1', 'model2', 'model3'])
    @pytest.mark.parametrize('sampler', SAMPLERS, ids=SAMPLER_IDS)
    def test_observed_cells_preserved(self, sampler, model, make_data, quick_config):
        _, amputed = make_data(model=model)
        result = sampler(amputed, AnalysisModel(model), quick_config)
        assert result.m == quick_config.m
        before = amputed.frame[amputed.value_names].to_numpy(dtype=float, na_value=np.nan)
        observed = ~np.isnan(before)
        for data in result.datasets:
            after = data.frame[amputed.value_names].to_numpy(dtype=float, na_value=np.nan)
            assert not np.isnan(after).any()
            np.testing.assert_array_equal(after[observed], before[observed])
            ses = data.column_with_nan('ses').reshape(-1, 3)
            assert (ses == ses[:, :1]).all()

    @pytest.mark.parametrize('sampler', SAMPLERS, ids=SAMPLER_IDS)
    def test_acceptance_recorded(self, sampler, amputed_data, quick_config):
        result = sampler(amputed_data, AnalysisModel.MODEL1, quick_config)
        acceptance = result.diagnostics.acceptance
        assert set(acceptance) == {'dep', 'ses'}
        assert all(0.0 <= rate <= 1.0 for rate in acceptance.values())

    def test_psr_gate_flags_run(self, amputed_data, quick_config):
        cfg = replace(quick_config, psr_threshold=0.5)
        result = impute_smc_jm_3l(amputed_data, AnalysisModel.MODEL1, cfg)
        assert result.diagnostics.psr
        assert not result.diagnostics.psr_ok

    def test_two_level_samplers_do_not_gate(self, amputed_data, quick_config):
        cfg = replace(quick_config, psr_threshold=0.5)
        assert impute_smc_jm_2l_di(amputed_data, AnalysisModel.MODEL1, cfg).diagnostics.psr_ok

    def test_same_seed_same_imputations(self, amputed_data, quick_config):
        a = impute_smc_sm_2l_di(amputed_data, AnalysisModel.MODEL2, None, quick_config).datasets[1]
        b = impute_smc_sm_2l_di(amputed_data, AnalysisModel.MODEL2, None, quick_config).datasets[1]
        np.testing.assert_array_equal(a.values(['dep', 'ses']), b.values(['dep', 'ses']))

    def test_plan_must_cover_both_covariates(self, amputed_data, quick_config):
        plan = CovariateModelPlan((CovariateModel('ses', 'normal-glm', ('sex',)),))
        with pytest.raises(ImputationError):
            impute_smc_sm_2l_di(amputed_data, AnalysisModel.MODEL1, plan, quick_config)

    @pytest.mark.parametrize('sampler', SAMPLERS, ids=SAMPLER_IDS)
    def test_more_chains_than_imputations(self, sampler, amputed_data, quick_config):
        result = sampler(amputed_data, AnalysisModel.MODEL1, replace(quick_config, m=2, chains=3))
        assert result.m == 2
        assert len({d.label for d in result.datasets}) == 2


class TestAcceptanceMonitor:
    """Per-iteration acceptance history and the low-acceptance warning"""

    def test_one_rate_per_iteration(self, amputed_data, quick_config):
        problem = _prepare(amputed_data, AnalysisModel.MODEL1)
        chain = _JointTwoLevelChain(problem, quick_config, np.random.default_rng(0))
        for _ in range(10):
            chain.step()
        assert len(chain.rate_history['dep']) == 10
        assert len(chain.rate_history['ses']) == 10
        assert all(0.0 <= r <= 1.0 for r in chain.rate_history['dep'])

    def _reject_everything(self, monkeypatch):
        def reject(current, proposal, loglik_sub, rng):
            current = np.asarray(current, dtype=float)
            return current.copy(), np.zeros(current.shape, dtype=bool)
        monkeypatch.setattr('mlmi_bench.lib.imputers_smc.mh_step', reject)

    def test_stuck_chain_warns(self, monkeypatch, amputed_data, quick_config):
        self._reject_everything(monkeypatch)
        cfg = replace(quick_config, m=2, chains=1, burn_in=LOW_ACCEPTANCE_WINDOW + 5, between=1)
        result = impute_smc_jm_2l_di(amputed_data, AnalysisModel.MODEL1, cfg)
        dep_warnings = [w for w in result.diagnostics.warnings if 'acceptance for dep' in w]
        assert len(dep_warnings) == 1
        assert any('acceptance for ses' in w for w in result.diagnostics.warnings)
        assert result.diagnostics.acceptance['dep'] == 0.0

    def test_short_run_does_not_warn(self, monkeypatch, amputed_data, quick_config):
        self._reject_everything(monkeypatch)
        cfg = replace(quick_config, m=2, chains=1, burn_in=LOW_ACCEPTANCE_WINDOW - 50, between=1)
        result = impute_smc_jm_2l_di(amputed_data, AnalysisModel.MODEL1, cfg)
        assert not [w for w in result.diagnostics.warnings if 'acceptance' in w]


class TestNestedRegression:

    def test_loglik_matches_normal_density(self):
        rng = np.random.default_rng(8)
        child = np.repeat(np.arange(4), 3)
        school = np.repeat([0, 0, 1, 1], 3)
        reg = _NestedRegression(child, school, use_child=True, use_school=True, scale=0.7)
        reg.beta = np.array([0.5, -1.0])
        reg.a = rng.standard_normal(4)
        reg.c = rng.standard_normal(2)
        X = np.column_stack([np.ones(12), rng.standard_normal(12)])
        y = rng.standard_normal(12)
        mean = X @ reg.beta + reg.a[child] + reg.c[school]
        np.testing.assert_allclose(reg.loglik(y, X), stats.norm.logpdf(y, mean, math.sqrt(0.7)), atol=1e-10)
        rows = np.array([1, 5, 9])
        np.testing.assert_allclose(reg.loglik(y[rows], X[rows], rows),
                                   stats.norm.logpdf(y[rows], mean[rows], math.sqrt(0.7)), atol=1e-10)


ORACLE_CONFIG = ImputationConfig(m=5, burn_in=150, between=20, seed=3, chains=2)


def _imputed_dep(amputed, result):
    missing = np.isnan(amputed.column_with_nan('dep'))
    return missing, np.concatenate([d.column_with_nan('dep')[missing] for d in result.datasets])


def _wide_imputed_dep(amputed, result):
    wide = reshape_wide(amputed)
    names = [wide.schema.column('dep').wide_name(k) for k in wide.schema.waves]
    cells = []
    for data in result.datasets:
        for name in names:
            cells.append(data.column_with_nan(name)[np.isnan(wide.column_with_nan(name))])
    return np.concatenate(cells)


@pytest.mark.slow
class TestImputationAccuracy:
    """Imputed exposure cells against the deleted values and against other samplers"""

    @pytest.mark.parametrize('model', ['model1', 'model3'])
    def test_imputed_cells_match_deleted_values(self, model, make_data):
        complete, amputed = make_data(model=model, n_schools=20, school_size=20, seed=21)
        result = impute_smc_jm_2l_di(amputed, AnalysisModel(model), ORACLE_CONFIG)
        missing, imputed = _imputed_dep(amputed, result)
        deleted = complete.column_with_nan('dep')[missing]
        assert abs(imputed.mean() - deleted.mean()) < 0.45
        assert 0.7 < imputed.var() / deleted.var() < 1.4

    def test_sequential_matches_joint_when_ses_complete(self, make_data):
        _, amputed = make_data(n_schools=20, school_size=20, seed=22, ses_mcar_rate=0.0)
        assert not np.isnan(amputed.column_with_nan('ses')).any()
        _, joint = _imputed_dep(amputed, impute_smc_jm_2l_di(amputed, AnalysisModel.MODEL1, ORACLE_CONFIG))
        _, sequential = _imputed_dep(amputed, impute_smc_sm_2l_di(amputed, AnalysisModel.MODEL1, None,
                                                                  ORACLE_CONFIG))
        assert abs(joint.mean() - sequential.mean()) < 0.3
        assert 0.75 < joint.var() / sequential.var() < 1.33

    def test_three_level_matches_two_level_without_school_variance(self, make_data):
        _, amputed = make_data(n_schools=20, school_size=20, seed=23,
                               params={'sigma_u3': 0.0, 'sigma3': 0.0})
        _, two = _imputed_dep(amputed, impute_smc_jm_2l_di(amputed, AnalysisModel.MODEL1, ORACLE_CONFIG))
        _, three = _imputed_dep(amputed, impute_smc_jm_3l(amputed, AnalysisModel.MODEL1, ORACLE_CONFIG))
        assert abs(two.mean() - three.mean()) < 0.3
        assert 0.75 < two.var() / three.var() < 1.33

    def test_agrees_with_single_level_jm(self, make_data):
        _, amputed = make_data(n_schools=20, school_size=20, seed=24)
        _, smc = _imputed_dep(amputed, impute_smc_jm_2l_di(amputed, AnalysisModel.MODEL1, ORACLE_CONFIG))
        jm = _wide_imputed_dep(amputed, impute_jm_1l_di_wide(reshape_wide(amputed), ORACLE_CONFIG))
        assert abs(smc.mean() - jm.mean()) < 0.3
        assert 0.75 < smc.var() / jm.var() < 1.33

    def test_model2_interaction_recovered(self, make_data):
        _, amputed = make_data(model='model2', n_schools=40, school_size=30, seed=25)
        result = impute_smc_jm_3l(amputed, AnalysisModel.MODEL2, ORACLE_CONFIG)
        estimate = analyse_imputed_set(SubstantiveModelSpec.for_model(AnalysisModel.MODEL2), result)
        beta3 = estimate.pooled['beta3']
        truth = true_values(AnalysisModel.MODEL2)['beta3']
        assert abs(beta3.q_bar - truth) < 3 * beta3.se
