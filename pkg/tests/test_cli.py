import json

import pandas as pd
import pytest

from mutual_taught import storage
from mutual_taught.cli import main
from mutual_taught.errors import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFICATION

from .conftest import tiny_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(tiny_config().model_dump_json())
    return path


def test_no_command_prints_help(capsys):
    assert main([]) == EXIT_CONFIG
    assert "gradcheck" in capsys.readouterr().out


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--instances", "5"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_detects_perturbation(capsys):
    code = main(["gradcheck", "--instances", "2", "--perturb", "1e-3"])
    assert code == EXIT_VERIFICATION
    assert "FAIL" in capsys.readouterr().out


def test_run_command(tmp_path, config_file):
    out = tmp_path / "out"
    assert main(["run", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
    assert (out / storage.SUMMARY).exists()
    echo = json.loads((out / storage.CONFIG_ECHO).read_text())
    assert echo["seeds"] == [0, 1]


def test_run_seed_and_flags(tmp_path, config_file):
    out = tmp_path / "out"
    argv = ["run", "--config", str(config_file), "--out", str(out), "--seed", "7"]
    assert main(argv + ["--save-env", "--transfer"]) == EXIT_OK
    summary = pd.read_csv(out / storage.SUMMARY)
    assert set(summary.seed) == {7}
    assert summary.metric.str.startswith("transfer_").any()
    assert (out / "env-7.json").exists()


def test_baseline_command(tmp_path, config_file):
    out = tmp_path / "out"
    argv = ["baseline", "--method", "iter-dpo", "--config", str(config_file)]
    assert main(argv + ["--out", str(out)]) == EXIT_OK
    echo = json.loads((out / storage.CONFIG_ECHO).read_text())
    assert echo["method"] == "iter-dpo-fixed-rm"


def test_ablate_command(tmp_path, config_file):
    out = tmp_path / "out"
    argv = ["ablate", "--axis", "rm-data", "--config", str(config_file)]
    assert main(argv + ["--out", str(out)]) == EXIT_OK
    tests = pd.read_csv(out / storage.SIGN_TESTS)
    assert tests.variant.tolist() == ["policy-comparison", "self-training"]


def test_invalid_config_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"loop": {"tau": 1.5}}')
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    missing = str(tmp_path / "nope.toml")
    assert main(["run", "--config", missing, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_unknown_axis_is_rejected():
    with pytest.raises(SystemExit):
        main(["ablate", "--axis", "beta"])


def test_unwritable_output_directory(tmp_path, config_file):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    argv = ["run", "--config", str(config_file), "--out", str(blocker / "out")]
    assert main(argv) == EXIT_RUNTIME
