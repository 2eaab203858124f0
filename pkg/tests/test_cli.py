import json

import pytest

from conftest import tiny_experiment
from fedad.cli import main


def _write_config(tmp_path, doc):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    doc = tiny_experiment(tmp, name="cli-tiny")
    cfg = _write_config(tmp, doc)
    assert main(["run-all", "--config", str(cfg)]) == 0
    return tmp, cfg, doc


def test_run_all_produces_artifacts(completed_run, capsys):
    tmp, cfg, doc = completed_run
    out = tmp / "cli-tiny"
    for rel in ("partition.json", "manifest.json", "ledger.json",
                "student/student.pt", "report/report.json", "report/metrics.csv",
                "report/figures/loss_curves.png", "report/figures/metric_bars.png",
                "report/figures/attention_overlays.png"):
        assert (out / rel).exists(), rel


def test_evaluate_reuses_checkpoints(completed_run, capsys):
    tmp, cfg, doc = completed_run
    out = tmp / "cli-tiny"
    mtime = (out / "student" / "student.pt").stat().st_mtime_ns
    assert main(["evaluate", "--config", str(cfg)]) == 0
    assert (out / "student" / "student.pt").stat().st_mtime_ns == mtime  # no retraining
    captured = capsys.readouterr()
    assert "central accuracy" in captured.out


def test_per_stage_commands(tmp_path, capsys):
    doc = tiny_experiment(tmp_path, name="stage-by-stage")
    cfg = _write_config(tmp_path, doc)
    assert main(["partition", "--config", str(cfg)]) == 0
    assert main(["train-local", "--config", str(cfg), "--node", "0"]) == 0
    assert main(["train-local", "--config", str(cfg), "--node", "1"]) == 0
    assert main(["products", "--config", str(cfg), "--node", "0"]) == 0
    assert main(["products", "--config", str(cfg), "--node", "1"]) == 0
    assert main(["distill", "--config", str(cfg)]) == 0
    assert main(["evaluate", "--config", str(cfg)]) == 0
    assert main(["report", "--config", str(cfg)]) == 0


def test_invalid_alpha_exits_2_before_compute(tmp_path, capsys):
    doc = tiny_experiment(tmp_path, name="bad-alpha")
    doc["partition"]["alpha"] = 0.0
    cfg = _write_config(tmp_path, doc)
    assert main(["run-all", "--config", str(cfg)]) == 2
    assert not (tmp_path / "bad-alpha").exists()  # rejected before any stage ran
    assert "alpha" in capsys.readouterr().err


def test_missing_dependency_exits_3(tmp_path, capsys):
    doc = tiny_experiment(tmp_path, name="no-partition")
    cfg = _write_config(tmp_path, doc)
    assert main(["train-local", "--config", str(cfg), "--node", "0"]) == 3
    assert "partition" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["run-all", "--config", str(tmp_path / "absent.json")]) == 2


def test_bad_dataset_path_exits_4(tmp_path, capsys):
    doc = tiny_experiment(tmp_path, name="bad-data")
    doc["dataset"] = {"path": str(tmp_path / "nope.npz"), "format": "npz"}
    cfg = _write_config(tmp_path, doc)
    assert main(["run-all", "--config", str(cfg)]) == 4


def test_node_argument_validated(tmp_path, capsys):
    doc = tiny_experiment(tmp_path, name="node-check")
    cfg = _write_config(tmp_path, doc)
    assert main(["train-local", "--config", str(cfg)]) == 2
    assert main(["train-local", "--config", str(cfg), "--node", "9"]) == 2


def test_yaml_config_accepted(tmp_path):
    import yaml

    doc = tiny_experiment(tmp_path, name="yaml-run")
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    assert main(["partition", "--config", str(path)]) == 0


def test_seed_override_changes_partition(tmp_path):
    doc = tiny_experiment(tmp_path, name="seed-a")
    del doc["partition"]["seed"]  # let the master seed drive it
    cfg = _write_config(tmp_path, doc)
    assert main(["partition", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["partition", "--config", str(cfg), "--seed-override", "99",
                 "--out", str(tmp_path / "b")]) == 0
    a = json.loads((tmp_path / "a" / "partition.json").read_text())
    b = json.loads((tmp_path / "b" / "partition.json").read_text())
    assert a["assignments"] != b["assignments"]


def test_output_root_env(tmp_path, monkeypatch):
    doc = tiny_experiment(tmp_path, name="env-root")
    doc["out_dir"] = "relative-run"
    cfg = _write_config(tmp_path, doc)
    monkeypatch.setenv("FEDAD_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["partition", "--config", str(cfg)]) == 0
    assert (tmp_path / "root" / "relative-run" / "partition.json").exists()


def test_baseline_fedavg_command(tmp_path, capsys):
    doc = tiny_experiment(tmp_path, name="cli-fedavg")
    doc["fedavg"] = {"rounds": 1, "local_epochs": 0}
    cfg = _write_config(tmp_path, doc)
    assert main(["baseline-fedavg", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "total bytes" in out
    assert (tmp_path / "cli-fedavg" / "fedavg" / "ledger.json").exists()
