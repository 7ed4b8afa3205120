"""
Tests for the nested random-intercept REML fitter
"""
import numpy as np
import pandas as pd
import pytest

from mlmi_bench.lib.data_model import Column, Level, LongDataset, Role, Schema
from mlmi_bench.lib.lmm import LmmSpec, RankDeficiencyError, Term, fit_lmm, reml_objective


def _toy_schema():
    return Schema((Column('y', Role.OUTCOME, Level.TIME_VARYING),
                   Column('x', Role.EXPOSURE, Level.TIME_VARYING),
                   Column('z', Role.CONFOUNDER, Level.CHILD)), (3, 5, 7))


def _toy_data(n_schools=3, n_children=4, sd=(0.8, 1.0, 0.6), seed=0, y=None):
    rng = np.random.default_rng(seed)
    school = np.repeat(np.arange(1, n_schools + 1), n_children * 3)
    child = np.tile(np.repeat(np.arange(1, n_children + 1), 3), n_schools)
    wave = np.tile([3, 5, 7], n_schools * n_children)
    n = len(school)
    x = rng.standard_normal(n)
    z = np.repeat(rng.standard_normal(n_schools * n_children), 3)
    u3 = sd[0] * rng.standard_normal(n_schools)
    u2 = sd[1] * rng.standard_normal(n_schools * n_children)
    if y is None:
        y = 1.0 + 0.5 * x - 0.3 * z + u3[school - 1] + np.repeat(u2, 3) + sd[2] * rng.standard_normal(n)
    frame = pd.DataFrame({'school': school, 'child': child, 'wave': wave, 'y': y, 'x': x, 'z': z})
    return LongDataset(frame, _toy_schema())


SPEC = LmmSpec('y', (Term.main('x'), Term.main('z')))


class TestFit:
    """REML estimates"""

    def test_vc_non_negative(self):
        fit = fit_lmm(SPEC, _toy_data(n_schools=6, n_children=8))
        assert all(v >= 0 for v in fit.vc)
        assert fit.column_labels == ['(Intercept)', 'x', 'z']

    def test_constant_response(self):
        data = _toy_data(y=np.full(36, 2.5))
        fit = fit_lmm(LmmSpec('y', ()), data)
        assert fit.beta_hat[0] == pytest.approx(2.5)
        assert fit.vc == (0.0, 0.0, 0.0)
        assert fit.converged
        assert 'exactly explained' in fit.message

    def test_collinear_design(self):
        spec = LmmSpec('y', (Term.main('x'), Term.product('x', 'x'), Term.square('x')))
        with pytest.raises(RankDeficiencyError, match='x'):
            fit_lmm(spec, _toy_data())

    def test_loglik_matches_objective(self):
        data = _toy_data(n_schools=5, n_children=6, seed=3)
        fit = fit_lmm(SPEC, data)
        assert fit.reml_loglik == pytest.approx(reml_objective(SPEC, data, fit.vc), abs=1e-8)

    def test_optimum_beats_perturbations(self):
        data = _toy_data(n_schools=5, n_children=6, seed=4)
        fit = fit_lmm(SPEC, data)
        best = reml_objective(SPEC, data, fit.vc)
        rng = np.random.default_rng(9)
        for _ in range(100):
            candidate = np.maximum(np.asarray(fit.vc) * np.exp(0.3 * rng.standard_normal(3)) +
                                   0.01 * rng.uniform(size=3), 0.0)
            assert reml_objective(SPEC, data, candidate) <= best + 1e-6, candidate

    def test_grid_search_agreement(self):
        data = _toy_data(n_schools=3, n_children=4, seed=1)
        spec = LmmSpec('y', (Term.main('x'),))
        fit = fit_lmm(spec, data)
        if not all(v > 0 for v in fit.vc):
            pytest.skip('optimum on the boundary for this draw')
        center = np.asarray(fit.vc)
        grid = [center * f for f in (0.9, 0.97, 1.0, 1.03, 1.1)]
        values = {}
        for a in grid:
            for b in grid:
                for c in grid:
                    candidate = (a[0], b[1], c[2])
                    values[candidate] = reml_objective(spec, data, candidate)
        argmax = max(values, key=values.get)
        np.testing.assert_allclose(argmax, center, atol=1e-3 + 0.03 * center.max())

    def test_balanced_one_way_matches_anova(self):
        """Two-level layout without covariates: REML equals method of moments when interior"""
        rng = np.random.default_rng(12)
        n_groups, size = 20, 3
        effects = np.repeat(1.5 * rng.standard_normal(n_groups), size)
        y = 0.4 + effects + rng.standard_normal(n_groups * size)
        frame = pd.DataFrame({'school': np.ones(n_groups * size, dtype=int),
                              'child': np.repeat(np.arange(1, n_groups + 1), size),
                              'wave': np.tile([3, 5, 7], n_groups), 'y': y, 'x': y, 'z': 0.0})
        frame['z'] = np.repeat(np.arange(n_groups, dtype=float), size)
        data = LongDataset(frame, _toy_schema())
        fit = fit_lmm(LmmSpec('y', (), random_intercepts=('school:child',)), data)

        groups = y.reshape(n_groups, size)
        msw = ((groups - groups.mean(axis=1, keepdims=True)) ** 2).sum() / (n_groups * (size - 1))
        msb = size * ((groups.mean(axis=1) - y.mean()) ** 2).sum() / (n_groups - 1)
        assert msb > msw
        assert fit.vc[2] == pytest.approx(msw, rel=1e-4)
        assert fit.vc[1] == pytest.approx((msb - msw) / size, rel=1e-4)
        assert fit.vc[0] == 0.0

    def test_coef_lookup(self):
        fit = fit_lmm(SPEC, _toy_data(n_schools=6, n_children=8))
        estimate, se = fit.coef('x')
        assert se > 0
        assert abs(estimate - 0.5) < 6 * se

    def test_no_random_variation_matches_ols(self):
        data = _toy_data(n_schools=30, n_children=40, sd=(0.0, 0.0, 1.0), seed=2)
        frame = data.frame
        X = np.column_stack([np.ones(data.n_rows), frame['x'].to_numpy(float), frame['z'].to_numpy(float)])
        ols = np.linalg.lstsq(X, frame['y'].to_numpy(float), rcond=None)[0]
        np.testing.assert_allclose(fit_lmm(SPEC, data).beta_hat, ols, atol=1e-2)

    def test_constant_shift_moves_intercept_only(self):
        data = _toy_data(n_schools=5, n_children=6, seed=11)
        # values on a binary grid so adding 5 is exact
        y = np.round(data.frame['y'].to_numpy(float) * 2 ** 20) / 2 ** 20
        base = fit_lmm(SPEC, data.with_values({'y': y}))
        shifted = fit_lmm(SPEC, data.with_values({'y': y + 5.0}))
        assert shifted.beta_hat[0] - base.beta_hat[0] == pytest.approx(5.0, abs=1e-10)
        np.testing.assert_allclose(shifted.beta_hat[1:], base.beta_hat[1:], atol=1e-10)
        np.testing.assert_allclose(shifted.vc, base.vc, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(shifted.se_beta, base.se_beta, rtol=1e-10)

    def test_covariance_matches_dense_gls(self):
        data = _toy_data(n_schools=4, n_children=5, seed=13)
        fit = fit_lmm(SPEC, data)
        np.testing.assert_allclose(fit.se_beta, np.sqrt(np.diag(fit.cov_beta)))
        frame = data.frame
        X = np.column_stack([np.ones(data.n_rows), frame['x'].to_numpy(float), frame['z'].to_numpy(float)])
        school = frame['school'].to_numpy()
        child = frame['child'].to_numpy()
        same_school = (school[:, None] == school[None, :]).astype(float)
        same_child = same_school * (child[:, None] == child[None, :])
        s3, s2, s1 = fit.vc
        V = s3 * same_school + s2 * same_child + s1 * np.eye(data.n_rows)
        expected = np.linalg.inv(X.T @ np.linalg.solve(V, X))
        np.testing.assert_allclose(fit.cov_beta, expected, rtol=1e-6)


class TestObjective:
    """Restricted log-likelihood"""

    def test_invariant_to_fixed_effect_shift(self):
        data = _toy_data(n_schools=4, n_children=5, seed=6)
        rng = np.random.default_rng(1)
        c = rng.standard_normal(3)
        frame = data.frame
        X = np.column_stack([np.ones(data.n_rows), frame['x'].to_numpy(float), frame['z'].to_numpy(float)])
        shifted = data.with_values({'y': frame['y'].to_numpy(float) + X @ c})
        vc = (0.3, 0.7, 0.5)
        assert reml_objective(SPEC, shifted, vc) == pytest.approx(reml_objective(SPEC, data, vc), rel=1e-9)

    def test_negative_component_rejected(self):
        with pytest.raises(ValueError):
            reml_objective(SPEC, _toy_data(), (-0.1, 0.2, 0.3))

    def test_small_instance_matches_dense_marginal(self):
        """6-row instance checked against the explicit marginal covariance"""
        data = _toy_data(n_schools=2, n_children=1, seed=8)
        spec = LmmSpec('y', (Term.main('x'),))
        frame = data.frame
        X = np.column_stack([np.ones(6), frame['x'].to_numpy(float)])
        y = frame['y'].to_numpy(float)
        school = frame['school'].to_numpy()
        same_school = (school[:, None] == school[None, :]).astype(float)
        for s3, s2, s1 in [(0.2, 0.3, 0.5), (0.0, 0.6, 1.2), (1.0, 0.0, 0.1)]:
            V = s3 * same_school + s2 * same_school + s1 * np.eye(6)
            Vi = np.linalg.inv(V)
            XtViX = X.T @ Vi @ X
            beta = np.linalg.solve(XtViX, X.T @ Vi @ y)
            r = y - X @ beta
            expected = -0.5 * (np.linalg.slogdet(V)[1] + np.linalg.slogdet(XtViX)[1] + r @ Vi @ r
                               + 4 * np.log(2 * np.pi))
            assert reml_objective(spec, data, (s3, s2, s1)) == pytest.approx(expected, rel=1e-9)
