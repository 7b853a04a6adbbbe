import csv
import json
import subprocess
import sys

import pytest

from pfode.cli import main
from pfode.harness import CSV_COLUMNS

BASE = {
    "n_particles": 500,
    "grid": {"n_steps": [8, 16, 32]},
    "schemes": ["RK2"],
    "eps_score": 1e-4,
    "noise_floor": 1e-6,
}


@pytest.fixture
def config(tmp_path):
    def make(**changes):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({**BASE, **changes}))
        return str(path)
    return make


def test_validate_ok(config, capsys):
    assert main(["validate", "--config", config()]) == 0
    assert "config ok" in capsys.readouterr().out


def test_validate_misaligned_is_config_error(config, capsys):
    path = config(schemes=["RK3"], grid={"n_steps": [100]})
    assert main(["validate", "--config", path]) == 2
    assert "5.12" in capsys.readouterr().err
    assert main(["validate", "--config", path, "--no-strict-alignment"]) == 0


def test_unknown_key_and_missing_file(config, tmp_path):
    assert main(["validate", "--config", config(bogus=1)]) == 2
    assert main(["validate", "--config", str(tmp_path / "nope.json")]) == 2


def test_bad_threads(config):
    assert main(["validate", "--config", config(), "--threads", "0"]) == 2


def test_run_writes_csv_and_manifest(config, tmp_path):
    out = tmp_path / "res" / "run.csv"
    code = main(["run", "--config", config(), "--out", str(out), "--seed", "5",
                 "--scheme", "RK4", "--n-steps", "16"])
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == list(CSV_COLUMNS)
    assert rows[0]["scheme"] == "RK4" and rows[0]["n_steps"] == "16" and rows[0]["seed"] == "5"
    manifest = (tmp_path / "res" / "run.manifest.txt").read_text()
    assert "pfode run" in manifest and '"seed": 5' in manifest


def test_convergence_stdout_and_thread_invariance(config, capsys):
    path = config()
    assert main(["convergence", "--config", path, "--no-timing"]) == 0
    one = capsys.readouterr()
    assert main(["convergence", "--config", path, "--no-timing", "--threads", "2"]) == 0
    two = capsys.readouterr()
    assert one.out == two.out
    assert one.out.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert "RK2: fitted order" in one.err


def test_score_error_requires_sweep(config):
    assert main(["score-error", "--config", config()]) == 2
    path = config(eps_score=[0.0, 1e-2, 3e-2, 1e-1], grid={"n_steps": [16]}, schemes=["RK4"])
    assert main(["score-error", "--config", path, "--no-timing"]) == 0


def test_divergent_run_exit_code(config):
    path = config(schemes=["RK1"], eps_score=1e308)
    assert main(["run", "--config", path, "--no-timing"]) == 3


def test_console_script_entry(config):
    proc = subprocess.run([sys.executable, "-m", "pfode.cli", "validate", "--config", config()],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
