import csv
import json
import subprocess
import sys

import pytest

from kfipf.bench import ExperimentConfig, roster
from kfipf.cli import main


@pytest.fixture
def cfg_path(tmp_path):
    cfg = ExperimentConfig(T=4, n_mc=2, spinup=20, master_seed=3, filters=roster([("U-IPF", 4), ("E-IPF", 5)]))
    p = tmp_path / "cfg.json"
    p.write_text(cfg.to_json())
    return p


def test_simulate(cfg_path, tmp_path, capsys):
    assert main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / "sim")]) == 0
    rows = list(csv.reader((tmp_path / "sim" / "truth.csv").open()))
    assert len(rows) == 1 + 5
    assert "wrote" in capsys.readouterr().out


def test_run_writes_estimates(cfg_path, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg_path), "--filter", "U-IPF", "--particles", "4",
                 "--seed", "11", "--out", str(out)]) == 0
    rows = list(csv.reader((out / "estimates.csv").open()))
    assert rows[0][0] == "k" and rows[0][-1] == "rmse" and len(rows) == 5
    meta = json.loads((out / "run.json").read_text())
    assert meta["filter"] == "U-IPF" and meta["N"] == 4 and meta["seed"] == 11


def test_compare_writes_report(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("IPF_THREADS", "1")
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(cfg_path), "--out", str(out), "--quiet"]) == 0
    assert {p.name for p in out.iterdir()} == {"rmse.csv", "timing.csv", "report.json"}


@pytest.mark.parametrize("argv", [
    ["run", "--filter", "KF", "--particles", "3", "--seed", "1"],
    ["run", "--filter", "EPF", "--particles", "0", "--seed", "1"],
    ["run", "--filter", "EPF", "--particles", "3", "--seed", "-1"],
])
def test_bad_run_arguments_exit_2(cfg_path, tmp_path, argv):
    assert main(argv[:1] + ["--config", str(cfg_path), "--out", str(tmp_path / "o")] + argv[1:]) == 2


def test_bad_config_exit_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"alpha": 2.0}))
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    p.write_text("{")
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_bad_thread_env_exit_2(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("IPF_THREADS", "none")
    assert main(["compare", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 2


def test_io_errors_exit_4(cfg_path, tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 4
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["simulate", "--config", str(cfg_path), "--out", str(blocker / "x")]) == 4


def test_filter_failure_exit_3(cfg_path, tmp_path, monkeypatch):
    from kfipf import bench
    from kfipf.filters import FilterFatalError

    def boom(*a, **k):
        raise FilterFatalError("every particle failed", 1)

    monkeypatch.setattr(bench, "run_single", boom)
    monkeypatch.setenv("IPF_THREADS", "1")
    assert main(["run", "--config", str(cfg_path), "--filter", "EPF", "--particles", "3",
                 "--seed", "1", "--out", str(tmp_path / "r")]) == 3
    assert main(["compare", "--config", str(cfg_path), "--out", str(tmp_path / "c"), "--quiet"]) == 3
    assert json.loads((tmp_path / "c" / "report.json").read_text())["filters"][0]["report_failed"]


def test_module_entry_point(cfg_path, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "kfipf", "simulate", "--config", str(cfg_path),
                           "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "m" / "truth.csv").exists()
