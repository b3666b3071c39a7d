import pytest
from click.testing import CliRunner

from biofilm_pvi import __version__
from biofilm_pvi.main import cli


@pytest.fixture
def runner(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("PVI_LOG_DIR", raising=False)
    return CliRunner()


def test_version(runner):
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_list(runner):
    result = runner.invoke(cli, ["list"])
    assert result.exit_code == 0
    assert "ex5_1" in result.output
    assert "appendix_A2" in result.output


def test_run_writes_outputs(runner, tmp_path):
    out = tmp_path / "ex5_1"
    result = runner.invoke(cli, ["run", "ex5_1", "--dt", "0.01", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "series.csv").exists()
    assert sorted(path.name for path in out.glob("*.vtk")) == ["state_t000.vtk", "state_t001.vtk"]
    assert "activation time" in result.output


def test_run_from_config_file(runner, tmp_path):
    config = tmp_path / "small.yaml"
    config.write_text(
        "experiment: ex5_1\ndt: 0.01\nT: 0.05\nsample_times: [0.05]\nmesh_cells: 20\n"
    )
    out = tmp_path / "small"
    result = runner.invoke(cli, ["run", "--config", str(config), "--out", str(out)])
    assert result.exit_code == 0, result.output
    rows = (out / "series.csv").read_text().splitlines()
    assert len(rows) == 7


def test_unknown_experiment_lists_names(runner):
    result = runner.invoke(cli, ["run", "ex9_9"])
    assert result.exit_code == 2
    assert "ex9_9" in result.output
    assert "ex5_1" in result.output


@pytest.mark.parametrize(
    "args",
    [
        ["run"],
        ["run", "ex5_1", "--config", "other.yaml"],
        ["run", "ex5_1", "--dt", "-0.1"],
        ["run", "ex5_1", "--dt", "0.03"],
        ["converge", "ex5_5"],
        ["converge", "ex5_1", "--levels", "0"],
    ],
)
def test_invalid_invocations_exit_with_2(runner, args):
    result = runner.invoke(cli, args)
    assert result.exit_code == 2


def test_oracle_check_passes(runner):
    result = runner.invoke(cli, ["oracle-check", "--instances", "5"])
    assert result.exit_code == 0, result.output
    assert "All 5 oracle checks agree" in result.output


def test_oracle_check_detects_sign_flip(runner):
    result = runner.invoke(cli, ["oracle-check", "--inject-sign-flip"])
    assert result.exit_code == 1
    assert "MISMATCH" in result.output


@pytest.mark.slow
def test_converge_writes_table(runner, tmp_path):
    out = tmp_path / "study"
    result = runner.invoke(cli, ["converge", "appendix_A1", "--levels", "2", "--out", str(out)])
    assert result.exit_code == 0, result.output
    lines = (out / "convergence.csv").read_text().splitlines()
    assert lines[0] == "h,dt,err1,err2,order1,order2"
    assert len(lines) == 3
