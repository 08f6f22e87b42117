import subprocess
import sys

import pytest

from geoincidence.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

from test_pipeline import TINY, _flat_dataset, write_config


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "evaluate" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["fly", "--config", "x.ini"], ["synth"],
                                  ["forecast", "--config", "x.ini", "--model", "lstm",
                                   "--horizon", "7"],
                                  ["forecast", "--config", "x.ini", "--model", "sird",
                                   "--horizon", "0"],
                                  ["synth", "--config", "x.ini", "--frobnicate"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_evaluate_subset_validation(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["evaluate", "--config", str(cfg), "--models", "arma,lstm"]) == EXIT_USAGE
    assert main(["evaluate", "--config", str(cfg), "--horizons", "7,x"]) == EXIT_USAGE


def test_missing_config_is_a_data_error(tmp_path, capsys):
    assert main(["synth", "--config", str(tmp_path / "none.ini")]) == EXIT_DATA
    assert "not found" in capsys.readouterr().err


def test_bad_case_file_is_a_data_error(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["synth", "--config", str(cfg)]) == EXIT_OK
    cases = tmp_path / "data" / "cases.csv"
    lines = cases.read_text().splitlines()
    lines[6] = lines[6].rsplit(",", 1)[0] + ",-4"
    cases.write_text("\n".join(lines) + "\n")
    assert main(["simulate", "--config", str(cfg)]) == EXIT_DATA
    assert "cases.csv:7: negative" in capsys.readouterr().err


def test_singular_var_is_a_numerical_failure(tmp_path, capsys):
    _flat_dataset(tmp_path)
    text = TINY.replace("var_p = 1", "var_p = 1\nvar_ridge = 0")
    cfg = write_config(tmp_path, text.replace("waves = 0:0.35:30", "waves ="))
    assert main(["evaluate", "--config", str(cfg), "--models", "var"]) == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def test_forecast_prints_output_directory(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["synth", "--config", str(cfg)]) == EXIT_OK
    capsys.readouterr()
    assert main(["forecast", "--config", str(cfg), "--model", "persistence",
                 "--horizon", "3"]) == EXIT_OK
    out = capsys.readouterr().out.strip()
    assert out.endswith("forecast/persistence_h3")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "geoincidence.cli", "synth"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
