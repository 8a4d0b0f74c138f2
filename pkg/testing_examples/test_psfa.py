#!/usr/bin/env python3
"""
Installation and package-surface checks for psfa
"""

import os
import subprocess
import sys

import pytest

REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))


def test_import():
    import psfa
    assert psfa.__version__


def test_help(capsys):
    import psfa
    psfa.help()
    out = capsys.readouterr().out
    assert 'psfa.fit(dataset, options)' in out
    assert 'psfa validate FILE' in out


def test_version():
    import psfa
    info = psfa.version()
    assert info['version'] == psfa.__version__
    assert info['mode'] == 'Python'
    assert info['numpy'] and info['scipy']


@pytest.mark.parametrize('module', ['numpy', 'scipy', 'scipy.special', 'scipy.optimize', 'tqdm'])
def test_dependencies(module):
    __import__(module)


def test_validate_missing_dataset():
    import psfa
    result = psfa.validate_dataset('nonexistent.psfa')
    assert result == {'valid': False, 'error': 'File not found: nonexistent.psfa'}


def test_cli_entry_point(capsys):
    import psfa
    assert psfa.cli(['--version']) == 0
    assert 'psfa version' in capsys.readouterr().out
    assert psfa.cli(['--help-psfa']) == 0


def test_module_execution():
    result = subprocess.run([sys.executable, '-m', 'psfa', '--version'], capture_output=True, text=True,
                            timeout=60, cwd=REPO_ROOT)
    assert result.returncode == 0
    assert result.stdout.startswith('psfa version')


def test_library_round_trip():
    import psfa
    ds, truth = psfa.generate_synthetic(psfa.SeededRng(1), V=40, T=8, B=2, D_true=2)
    state, report = psfa.fit(ds, psfa.FitOptions(D=3, max_iters=10))
    assert state.mu_A.shape == (40, 3)
    assert psfa.reconstruct(state, 0).shape == (40, 8)
    assert 0.0 <= psfa.avg_abs_correlation(psfa.match_components(state.mu_A, truth.A_true)) <= 1.0


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
