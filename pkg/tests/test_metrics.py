"""
Tests for performance measures and their CSV tables
"""
import math
import os

import numpy as np
import pandas as pd
import pytest

from mlmi_bench.metrics import (KEY_COLUMNS, METRICS_FILE, TABLE_COLUMNS, MissingTruthError, compute_metrics,
                                emit_tables, main, performance_row, read_table)

TRUTH = {'beta1': -0.07, 'beta3': 0.013, 'vc3': 0.04, 'vc2': 0.49, 'vc1': 0.49}


def _results(estimates, parameter='beta1', method='JM-1L-DI-wide', se=0.1, scenario='toy'):
    rows = []
    for index, value in enumerate(estimates):
        rows.append({'scenario': scenario, 'replication': index, 'attempt': 0, 'seed': index, 'method': method,
                     'parameter': parameter, 'estimate': value, 'se': se, 'df': 50.0,
                     'ci_low': value - 1.96 * se, 'ci_high': value + 1.96 * se, 'm': 10, 'status': 'ok'})
    return pd.DataFrame(rows)


class TestPerformanceRow:
    """Hand-computed measures"""

    def test_hand_oracle(self):
        estimates = np.array([1.0, 2.0, 3.0, 4.0])
        row = performance_row(estimates, np.full(4, 0.5), estimates - 1.0, estimates + 1.0, true_value=2.0)
        assert row['Average Estimate'] == 2.5
        assert row['Bias'] == 0.5
        assert row['Relative Bias (%)'] == 25.0
        assert row['Emp SE'] == pytest.approx(math.sqrt(5 / 3))
        assert row['Model SE'] == 0.5
        # intervals [0,2], [1,3], [2,4], [3,5] cover 2 for the first three
        assert row['Coverage'] == 75.0
        assert row['MCSE Coverage'] == pytest.approx(100 * math.sqrt(0.75 * 0.25 / 4))
        assert row['MCSE Bias'] == pytest.approx(math.sqrt(5 / 3) / 2)
        assert row['MCSE Emp SE'] == pytest.approx(math.sqrt(5 / 3) / math.sqrt(6))

    def test_equal_estimates(self):
        estimates = np.full(10, -0.07)
        row = performance_row(estimates, np.full(10, 0.01), estimates - 0.02, estimates + 0.02, -0.07)
        assert row['Bias'] == pytest.approx(0.0, abs=1e-15)
        assert row['Emp SE'] == pytest.approx(0.0, abs=1e-15)
        assert row['Coverage'] == 100.0

    def test_needs_two_replications(self):
        with pytest.raises(ValueError):
            performance_row(np.array([1.0]), np.array([0.1]), np.array([0.8]), np.array([1.2]), 1.0)

    def test_variance_components_have_no_interval(self):
        row = performance_row(np.array([0.4, 0.5]), np.full(2, np.nan), np.full(2, np.nan), np.full(2, np.nan),
                              0.49, with_interval=False)
        assert math.isnan(row['Model SE'])
        assert math.isnan(row['Coverage'])
        assert row['Bias'] == pytest.approx(-0.04)


class TestComputeMetrics:

    def test_one_row_per_method_and_parameter(self):
        results = pd.concat([_results([-0.06, -0.08, -0.07]),
                             _results([0.01, 0.02, 0.012], parameter='beta3'),
                             _results([-0.05, -0.09], method='SMC-JM-3L')])
        table = compute_metrics(results, TRUTH)
        assert list(table[KEY_COLUMNS].itertuples(index=False, name=None)) == [
            ('toy', 'JM-1L-DI-wide', 'beta1'), ('toy', 'JM-1L-DI-wide', 'beta3'), ('toy', 'SMC-JM-3L', 'beta1')]
        assert table['n_reps'].tolist() == [3, 3, 2]

    def test_failed_rows_are_dropped(self, caplog):
        results = _results([-0.06, np.nan, -0.08])
        with caplog.at_level('WARNING'):
            table = compute_metrics(results, TRUTH)
        assert table['n_reps'].iloc[0] == 2
        assert 'excluded' in caplog.text

    def test_missing_truth(self):
        with pytest.raises(MissingTruthError, match='beta3'):
            compute_metrics(_results([0.1, 0.2], parameter='beta3'), {'beta1': -0.07})

    def test_relative_bias_sign(self):
        table = compute_metrics(_results([-0.0735, -0.0735]), TRUTH)
        assert table['Relative Bias (%)'].iloc[0] == pytest.approx(5.0)


class TestTables:

    def test_written_tables(self, tmp_path):
        results = pd.concat([_results([-0.06, -0.08]), _results([0.5, 0.45], parameter='vc2')])
        paths = emit_tables(compute_metrics(results, TRUTH), str(tmp_path))
        names = sorted(os.path.basename(p) for p in paths)
        assert names == sorted([METRICS_FILE, 'toy_coefficients.csv', 'toy_variance.csv'])
        coefficients = read_table(str(tmp_path / 'toy_coefficients.csv'))
        assert list(coefficients.columns) == KEY_COLUMNS + TABLE_COLUMNS
        assert coefficients['Bias'].iloc[0] == pytest.approx(0.0, abs=1e-12)

    def test_empty_table_has_header(self, tmp_path):
        table = compute_metrics(_results([np.nan, np.nan]), TRUTH)
        emit_tables(table, str(tmp_path))
        text = (tmp_path / METRICS_FILE).read_text()
        assert text.strip().split(',')[:3] == KEY_COLUMNS

    def test_table_parses_back(self, tmp_path):
        table = compute_metrics(_results([-0.06, -0.08, -0.071]), TRUTH)
        emit_tables(table, str(tmp_path))
        back = read_table(str(tmp_path / METRICS_FILE))
        assert back['Emp SE'].iloc[0] == pytest.approx(table['Emp SE'].iloc[0])


class TestMain:

    def test_writes_tables(self, tmp_path, capsys):
        _results([-0.06, -0.08]).to_csv(tmp_path / 'results.csv', index=False)
        (tmp_path / 'truth.txt').write_text('beta1 = -0.07\n')
        main(['--in', str(tmp_path)])
        assert (tmp_path / METRICS_FILE).exists()
        assert '✓' in capsys.readouterr().out

    def test_missing_results_exit_code(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(['--in', str(tmp_path)])
        assert exc.value.code == 1
        assert 'Error' in capsys.readouterr().err
