"""
Tests for the conjugate posterior draws
"""
import numpy as np
import pytest

from mlmi_bench.lib.bayes_draws import (ImputationError, check_full_rank, draw_inverse_wishart,
                                        draw_missing_rows, draw_normal_regression)


class TestRank:

    def test_names_collinear_columns(self):
        x = np.arange(10, dtype=float)
        X = np.column_stack([np.ones(10), x, 2 * x])
        with pytest.raises(ImputationError, match='collinear'):
            check_full_rank(X, ['(Intercept)', 'a', 'b'])

    def test_full_rank_passes(self):
        X = np.column_stack([np.ones(5), np.arange(5.0)])
        check_full_rank(X)


class TestDraws:

    def test_inverse_wishart_positive_definite(self):
        rng = np.random.default_rng(0)
        draw = draw_inverse_wishart(10, np.eye(3), rng)
        assert draw.shape == (3, 3)
        np.linalg.cholesky(draw)

    def test_regression_needs_more_rows_than_columns(self):
        X = np.ones((2, 2))
        with pytest.raises(ImputationError):
            draw_normal_regression(X, np.zeros(2), np.random.default_rng(0))

    def test_regression_centred_on_least_squares(self):
        rng = np.random.default_rng(1)
        X = np.column_stack([np.ones(200), rng.standard_normal(200)])
        y = X @ np.array([1.0, -2.0]) + 0.5 * rng.standard_normal(200)
        ols = np.linalg.lstsq(X, y, rcond=None)[0]
        draws = np.array([draw_normal_regression(X, y, rng)[0] for _ in range(2000)])
        np.testing.assert_allclose(draws.mean(axis=0), ols, atol=0.01)

    def test_missing_rows_keep_observed_cells(self):
        rng = np.random.default_rng(2)
        Y = rng.standard_normal((50, 3))
        missing = rng.uniform(size=(50, 3)) < 0.3
        out = draw_missing_rows(Y, missing, np.zeros_like(Y), np.eye(3), rng)
        np.testing.assert_array_equal(out[~missing], Y[~missing])
        assert np.isfinite(out).all()

    def test_conditional_normal_moments(self):
        """y2 | y1 = 1 under unit variances and correlation 0.6 is N(0.6, 0.64)"""
        rng = np.random.default_rng(3)
        n = 20000
        Y = np.column_stack([np.ones(n), np.zeros(n)])
        missing = np.zeros((n, 2), dtype=bool)
        missing[:, 1] = True
        Sigma = np.array([[1.0, 0.6], [0.6, 1.0]])
        draws = draw_missing_rows(Y, missing, np.zeros((n, 2)), Sigma, rng)[:, 1]
        mc_se_mean = np.sqrt(0.64 / n)
        mc_se_var = 0.64 * np.sqrt(2.0 / (n - 1))
        assert abs(draws.mean() - 0.6) < 3 * mc_se_mean
        assert abs(draws.var(ddof=1) - 0.64) < 3 * mc_se_var
