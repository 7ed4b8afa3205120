"""
Tests for the mlmi-bench command line and the run entry point
"""
import json
import sys

import pandas as pd
import pytest

from mlmi_bench import cli, run
from mlmi_bench.metrics import RESULTS_FILE

TINY_CONFIG = """
[tiny]
analysis_model = model1
n_schools = 4
school_size = 8
mechanism = MAR_CATS
missing_wave2 = 0.15
missing_wave4 = 0.20
missing_wave6 = 0.30
seed = 5

[preset:desk]
reps = 2
m = 2
jm_burn_in = 20
jm_between = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / 'tiny.ini'
    path.write_text(TINY_CONFIG)
    return str(path)


def _cli(monkeypatch, *argv):
    monkeypatch.setattr(sys, 'argv', ['mlmi-bench', *argv])
    cli.main()


class TestCli:

    def test_help(self, monkeypatch, capsys):
        with pytest.raises(SystemExit) as exc:
            _cli(monkeypatch, '--help')
        assert exc.value.code == 0
        assert 'Commands:' in capsys.readouterr().out

    def test_no_command(self, monkeypatch):
        with pytest.raises(SystemExit) as exc:
            _cli(monkeypatch)
        assert exc.value.code == 1

    def test_unknown_command(self, monkeypatch, capsys):
        with pytest.raises(SystemExit) as exc:
            _cli(monkeypatch, 'launch')
        assert exc.value.code == 1
        assert 'Unknown command: launch' in capsys.readouterr().out

    def test_generate(self, monkeypatch, tiny_config, tmp_path):
        out = tmp_path / 'data' / 'tiny.csv'
        _cli(monkeypatch, 'generate', '--config', tiny_config, '--scenario', 'tiny', '--amputed', '--out', str(out))
        frame = pd.read_csv(out)
        assert len(frame) == 4 * 8 * 3
        assert frame['dep'].isna().any()

    def test_generate_unknown_scenario(self, monkeypatch, tiny_config, tmp_path):
        with pytest.raises(SystemExit) as exc:
            _cli(monkeypatch, 'generate', '--config', tiny_config, '--scenario', 'nope',
                 '--out', str(tmp_path / 'x.csv'))
        assert exc.value.code == 1


class TestRun:

    def test_dry_run_writes_manifest(self, tiny_config, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run.main(['--config', tiny_config, '--scenario', 'tiny', '--methods', 'JM-1L-DI-wide',
                      '--out', str(tmp_path), '--dry-run'])
        assert exc.value.code == 0
        manifest = json.loads((tmp_path / 'manifest.json').read_text())
        assert manifest['methods'] == ['JM-1L-DI-wide']
        assert len(manifest['replication_seeds']) == 2
        assert not (tmp_path / RESULTS_FILE).exists()

    def test_method_model_mismatch(self, tiny_config, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run.main(['--config', tiny_config, '--scenario', 'tiny', '--methods', 'JM-1L-DI-wide-JAV',
                      '--out', str(tmp_path)])
        assert exc.value.code == 1
        assert 'Error' in capsys.readouterr().err

    def test_scenario_required(self, tiny_config):
        with pytest.raises(SystemExit):
            run.main(['--config', tiny_config])

    @pytest.mark.slow
    def test_two_runs_are_identical(self, tiny_config, tmp_path):
        for name in ('a', 'b'):
            run.main(['--config', tiny_config, '--scenario', 'tiny', '--methods', 'JM-1L-DI-wide',
                      '--out', str(tmp_path / name)])
        first = (tmp_path / 'a' / RESULTS_FILE).read_bytes()
        assert first == (tmp_path / 'b' / RESULTS_FILE).read_bytes()
        results = pd.read_csv(tmp_path / 'a' / RESULTS_FILE)
        assert set(results['method']) == {'JM-1L-DI-wide'}
        assert (tmp_path / 'a' / 'truth.txt').exists()

    @pytest.mark.slow
    def test_manifest_rerun(self, tiny_config, tmp_path):
        run.main(['--config', tiny_config, '--scenario', 'tiny', '--methods', 'JM-1L-DI-wide',
                  '--out', str(tmp_path / 'a')])
        run.main(['--manifest', str(tmp_path / 'a' / 'manifest.json'), '--out', str(tmp_path / 'b')])
        assert (tmp_path / 'a' / RESULTS_FILE).read_bytes() == (tmp_path / 'b' / RESULTS_FILE).read_bytes()
