import pytest

from pywadmm import functionals
from pywadmm.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_SOLVER,
    EXIT_VALIDATION,
    WassersteinADMMCLI,
    cell_format,
    cmd_solve,
    cmd_validate,
    exit_status,
    pretty_printer,
    run,
)
from pywadmm.schema import CheckResult, ConvergenceError
from pywadmm.storage import RunStorage
from pywadmm.validation import PowerLawProxCheck

SMALL_FPK = """
[experiment]
preset = fpk

[grid]
bounds = -2:2, -2:2
counts = 9, 9

[run]
max_outer_iters = 4
snapshot_every = 2
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / 'fpk.ini'
    path.write_text(SMALL_FPK)
    return path


######################
# Formatting
######################


def test_cell_format():
    """Test the cell formatting of booleans, floats and lists."""
    assert cell_format(True) == '✅'
    assert cell_format(False) == '❌'
    assert cell_format(0.123456789) == '0.123457'
    assert cell_format(1e-12) == '1e-12'
    assert cell_format([0.5, 0.25]) == '0.5, 0.25'
    assert cell_format('text') == 'text'


def test_pretty_printer_tables():
    """Test that lists of rows and dicts are rendered as tables."""
    rows = pretty_printer([{'check': 'a', 'passed': True}, {'check': 'b', 'passed': False}])
    summary = pretty_printer({'iterations': 4, 'objective': 1.5})

    assert 'check' in rows and '✅' in rows and '❌' in rows
    assert 'iterations' in summary and '1.5' in summary
    assert pretty_printer(None) is None
    assert pretty_printer('done') == '\ndone\n'


def test_exit_status():
    """Test that any failed check maps to the validation exit code."""
    passed = CheckResult(check='a', residual=0.0, threshold=1.0, passed=True)
    failed = CheckResult(check='b', residual=2.0, threshold=1.0, passed=False)

    assert exit_status([passed]) == EXIT_OK
    assert exit_status([passed, failed]) == EXIT_VALIDATION
    assert exit_status({'iterations': 3}) == EXIT_OK


######################
# solve
######################


def test_solve_writes_run_directory(tmp_path, config_path):
    """Test the snapshot files, manifest and metrics of a small run."""
    output = tmp_path / 'out'

    assert run(['solve', '--config', str(config_path), '--output', str(output)]) == EXIT_OK

    storage = RunStorage(output)
    assert storage.list_snapshots() == [0, 2, 4]
    assert len(list(storage.snapshot_dir.glob('*.csv'))) == 9
    assert storage.manifest_path.exists()
    metrics = storage.load_metrics()
    assert metrics['summary']['iterations'] == 4
    assert len(metrics['summary']['reference_distance']) == 2
    assert [r['k'] for r in metrics['records']] == [1, 2, 3, 4]


def test_manifest_replays_run(tmp_path, config_path):
    """Test that rerunning from a manifest reproduces the snapshots."""
    first, second = tmp_path / 'first', tmp_path / 'second'
    run(['solve', '--config', str(config_path), '--output', str(first)])

    manifest = RunStorage(first).manifest_path
    assert run(['solve', '--config', str(manifest), '--output', str(second)]) == EXIT_OK

    for path in sorted((first / 'snapshots').glob('*.csv')):
        assert (second / 'snapshots' / path.name).read_text() == path.read_text()


def test_solve_flags_override_file(tmp_path, config_path):
    """Test the iteration, cadence and thread flags."""
    output = tmp_path / 'flags'

    cli = WassersteinADMMCLI()
    cli.solve(
        config=str(config_path), output=str(output), max_iters=3, snapshot_every=1, threads=2
    )

    assert cli.status == EXIT_OK
    assert RunStorage(output).load_metrics()['summary']['iterations'] == 3
    assert RunStorage(output).list_snapshots() == [0, 1, 2, 3]


def test_solve_centralized(tmp_path, config_path):
    """Test that the centralized baseline writes one measure per snapshot."""
    output = tmp_path / 'central'

    assert (
        run(['solve', '--config', str(config_path), '--output', str(output), '--centralized'])
        == EXIT_OK
    )

    assert len(list((output / 'snapshots').glob('mu_*.csv'))) == 3
    assert RunStorage(output).load_metrics()['summary']['max_pairwise'] == 0.0


def test_solve_config_errors(tmp_path):
    """Test that configuration problems exit with status 1."""
    bad = tmp_path / 'bad.ini'
    bad.write_text('[experiment]\npreset = fpk\n[inner]\ninner_iters = 0\n')

    assert run(['solve', '--config', str(bad)]) == EXIT_CONFIG
    assert run(['solve', '--output', str(tmp_path / 'x')]) == EXIT_CONFIG
    assert run(['solve', '--preset', 'heat']) == EXIT_CONFIG


@pytest.mark.parametrize(
    'grid',
    ['bounds = -2:2, -2:2\ncounts = 1, 9\n', 'bounds = 2:-2, -2:2\ncounts = 9, 9\n'],
)
def test_solve_invalid_grid(tmp_path, grid):
    """Test that a degenerate grid is a configuration error and writes nothing."""
    bad = tmp_path / 'grid.ini'
    bad.write_text('[experiment]\npreset = fpk\n[grid]\n' + grid)
    output = tmp_path / 'never'

    assert run(['solve', '--config', str(bad), '--output', str(output)]) == EXIT_CONFIG
    assert not output.exists()


def test_solver_error_keeps_partial_metrics(tmp_path, config_path, monkeypatch):
    """Test that a solver failure exits with status 2 after writing partial metrics."""

    def failing_prox(*args, **kwargs):
        raise ConvergenceError('prox did not converge', 1.0, 20)

    monkeypatch.setattr('pywadmm.outer_admm.prox', failing_prox)
    output = tmp_path / 'failed'

    assert run(['solve', '--config', str(config_path), '--output', str(output)]) == EXIT_SOLVER

    metrics = RunStorage(output).load_metrics()
    assert 'Worker 0 failed' in metrics['summary']['error']
    assert metrics['summary']['iterations'] == 0
    assert metrics['records'] == []


def test_cmd_solve(tmp_path, small_fpk_config, capsys, monkeypatch):
    """Test the exit statuses and printed summary of cmd_solve."""
    assert cmd_solve(small_fpk_config) == EXIT_OK
    assert 'iterations' in capsys.readouterr().out

    def stuck_prox(*args):
        raise ConvergenceError('stuck', 1.0, 1)

    monkeypatch.setattr('pywadmm.outer_admm.prox', stuck_prox)
    assert cmd_solve(small_fpk_config) == EXIT_SOLVER


######################
# enumerate-groupings
######################


def test_enumerate_groupings_command():
    """Test the grouping rows."""
    rows = WassersteinADMMCLI().enumerate_groupings(3, exclude_centralized=True)

    assert [row['#'] for row in rows] == [1, 2, 3, 4]
    assert [row['computers'] for row in rows] == [2, 2, 2, 3]


def test_enumerate_groupings_exit(capsys):
    """Test the command through the entry point."""
    assert run(['enumerate_groupings', '4', '--r', '2']) == EXIT_OK

    assert 'grouping' in capsys.readouterr().out


######################
# validate
######################


def _power_law_suite(seed: int = 0) -> list[CheckResult]:
    return [PowerLawProxCheck(seed=seed, repeats=3).evaluate()]


def test_validate_passes(monkeypatch, capsys):
    """Test a passing check and its exit status."""
    monkeypatch.setattr('pywadmm.cli.run_oracle_suite', _power_law_suite)

    assert cmd_validate() == EXIT_OK
    assert '✅' in capsys.readouterr().out


def test_validate_detects_broken_power_law_update(monkeypatch, capsys):
    """Test that a sign error in the power-law z-update fails validation."""
    original = functionals._power_law_z_update

    def flipped(log_gamma_y, a, beta, alpha_eps):
        return original(log_gamma_y, -a, beta, alpha_eps)

    monkeypatch.setattr(functionals, '_power_law_z_update', flipped)
    monkeypatch.setattr('pywadmm.cli.run_oracle_suite', _power_law_suite)

    assert cmd_validate() == EXIT_VALIDATION
    assert '❌' in capsys.readouterr().out


def test_validate_command_reports_failure(monkeypatch, capsys):
    """Test that the validate command returns the status of the failed suite."""
    failed = CheckResult(check='broken', residual=1.0, threshold=1e-8, passed=False)
    monkeypatch.setattr('pywadmm.cli.run_oracle_suite', lambda seed=0: [failed])

    assert run(['validate']) == EXIT_VALIDATION
    assert 'broken' in capsys.readouterr().out


@pytest.mark.slow
def test_full_oracle_suite():
    """Test that every oracle check passes."""
    assert run(['validate']) == EXIT_OK
