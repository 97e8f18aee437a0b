#!/usr/bin/env python3
"""
Tests for the command-line entry point and exit codes
"""

import pytest
import pandas as pd
import yaml
import sys
import os

# Add app directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'app'))

from errors import PopulationCapError
from main import LabApplication, build_parser, main, parse_overrides


@pytest.fixture
def run_args(tmp_path):
    """Arguments pointing at a missing config file and a scratch output directory"""
    def build(command, *extra):
        return [command, '--config', str(tmp_path / 'missing.conf'), '--out', str(tmp_path / 'out'), *extra]
    return build


class TestArguments:
    """Test argument parsing"""

    def test_overrides(self):
        """Test KEY=VALUE pairs"""
        assert parse_overrides(['alpha=0.4', ' N = 10 ']) == {'alpha': '0.4', 'N': '10'}

    def test_unknown_command(self):
        """Test argparse rejects unknown commands"""
        with pytest.raises(SystemExit):
            build_parser().parse_args(['plot'])


class TestExitCodes:
    """Test failures map to exit codes with a one-line message"""

    def test_gate_violation(self, run_args, capsys):
        """Test alpha >= 2/3 exits with 3"""
        assert main(run_args('exceptional-times', '--set', 'alpha=0.8')) == 3
        assert "error_code=3 error=ParameterGateError" in capsys.readouterr().err

    def test_unknown_key(self, run_args, capsys):
        """Test an unknown configuration key exits with 2"""
        assert main(run_args('simulate', '--set', 'bogus=1')) == 2
        assert "error=ConfigError" in capsys.readouterr().err

    def test_malformed_override(self, run_args):
        """Test --set without '=' exits with 2"""
        assert main(run_args('simulate', '--set', 'alpha')) == 2

    def test_population_cap(self, run_args, mocker):
        """Test a cap overflow exits with 4"""
        mocker.patch.object(LabApplication, 'simulate', side_effect=PopulationCapError(11, 10))
        assert main(run_args('simulate')) == 4


class TestRuns:
    """Test successful runs write their outputs"""

    def test_manifest_and_summary(self, run_args, tmp_path, mocker):
        """Test a handler's summary lands in summary.txt next to the manifest"""
        mocker.patch.object(LabApplication, 'bessel', return_value={'zero_gap_beta': '0.5'})
        assert main(run_args('bessel', '--replicas', '3', '--seed', '9')) == 0
        out = tmp_path / 'out'
        assert (out / 'summary.txt').read_text() == "command: bessel\nzero_gap_beta: 0.5\n"
        manifest = yaml.safe_load((out / 'manifest.yaml').read_text())
        assert manifest['seed'] == 9
        assert manifest['replica_spawn_keys'] == [[0], [1], [2]]
        assert manifest['config']['n_replicas'] == 3

    def test_simulate(self, run_args, tmp_path):
        """Test a small simulate run end to end"""
        code = main(run_args('simulate', '--replicas', '10', '--set', 'N=20', '--set', 'dt=0.01',
                             '--set', 'T=0.2'))
        assert code == 0
        table = pd.read_csv(tmp_path / 'out' / 'extinction_law.csv')
        assert table['t'].tolist() == pytest.approx([0.1, 0.2, 0.4])
        assert ((table['particle_survival'] >= 0) & (table['particle_survival'] <= 1)).all()
        trajectory = pd.read_csv(tmp_path / 'out' / 'trajectory.csv')
        assert list(trajectory.columns[:4]) == ['time', 'total_mass', 'v_mass', 'w_mass']
        # no ball in a plain run, so all mass stays V
        assert (trajectory['v_mass'] == trajectory['total_mass']).all()
        assert (trajectory['w_mass'] == 0).all()
