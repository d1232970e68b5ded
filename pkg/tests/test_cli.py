import json

import pytest
import yaml
from PIL import Image

from atoplab.cli import main
from atoplab.config import load_config

TINY = {
    "dataset": {"num_classes": 3, "n_per_class": 12, "n_test_per_class": 6, "size": 16},
    "classifier": {"epochs": 1, "width": 4, "batch_size": 16},
    "purifier": {"epochs": 1, "width": 4, "batch_size": 16, "kinds": ["RT1", "RT2"]},
    "atop": {"epochs": 1, "batch_size": 16, "kinds": ["RT2"]},
    "eval": {"subset_size": 8, "repeats": 2, "kinds": ["RT1", "RT2"]},
    "attacks": ["FGSM"],
    "sweep": {"values": [0.0, 0.5]},
    "render": {"n_examples": 2, "attack": "FGSM",
               "stages": ["clean", "adversarial", "transformed", "purified", "purified_adversarial"]},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_full_pipeline(tiny_config, tmp_path, capsys):
    out_dir = tmp_path / "runs"
    common = ["--config", str(tiny_config), "--out-dir", str(out_dir), "--seed", "7"]
    records = {}
    for cmd in ["train-classifier", "pretrain-purifier", "finetune-atop", "attack", "evaluate", "sweep",
                "render-grid"]:
        code, out, err = _run(capsys, cmd, *common)
        assert code == 0, err
        records[cmd] = json.loads(out)
        assert records[cmd]["seed"] == 7
    run = out_dir / f"{load_config(tiny_config).config_hash()}-seed7"
    assert records["evaluate"]["run_dir"] == str(run)
    for name in ["classifier.ckpt", "purifier_RT1.ckpt", "purifier_RT2.ckpt", "purifier_RT2_atop.ckpt",
                 "pretrain_RT2_log.csv", "atop_RT2_log.csv", "grid_RT2.png", "sweep_RT2_rate.csv"]:
        assert (run / name).exists(), name
    resolved = yaml.safe_load((run / "config.resolved.yaml").read_text())
    assert resolved["seeds"]["master"] == 7
    assert json.loads((run / "seeds.json").read_text())["master"] == 7
    report = json.loads(next((run / "reports").glob("report_seed7_*.json")).read_text())
    assert report["provenance"]["seed"] == 7
    assert {(r["transform"], r["atop"], r["attack"]) for r in report["rows"]} >= {
        ("RT1", False, "FGSM"), ("RT2", True, "FGSM")}
    sidecar = json.loads((run / "attacks" / "RT2" / "FGSM" / "attack.json").read_text())
    assert sidecar["master_seed"] == 7
    assert json.loads((run / "sweep_RT2_rate.json").read_text())["seed"] == 7
    assert Image.open(run / "grid_RT2.png").size[0] > 5 * 16 * 4


def test_evaluate_without_checkpoints_exits_3(tiny_config, tmp_path, capsys):
    code, _, err = _run(capsys, "evaluate", "--config", str(tiny_config), "--out-dir", str(tmp_path))
    assert code == 3
    record = json.loads(err.strip().splitlines()[-1])
    assert record["exit_code"] == 3 and "classifier.ckpt" in record["message"]
    assert next(tmp_path.glob("*/error.json")).exists()


def test_schema_violation_exits_2(tiny_config, tmp_path, capsys):
    code, _, err = _run(capsys, "evaluate", "--config", str(tiny_config), "--out-dir", str(tmp_path),
                        "--set", "eval.subset=3")
    assert code == 2
    assert "eval.subset" in json.loads(err.strip().splitlines()[-1])["message"]
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**TINY, "extra": {}}))
    assert _run(capsys, "evaluate", "--config", str(bad), "--out-dir", str(tmp_path))[0] == 2
    assert _run(capsys, "evaluate", "--device", "cuda:0", "--out-dir", str(tmp_path))[0] == 2


def test_missing_config_exits_3(tmp_path, capsys):
    code, _, err = _run(capsys, "train-classifier", "--config", str(tmp_path / "none.yaml"))
    assert code == 3 and "none.yaml" in err


def test_runtime_failure_exits_1(tiny_config, tmp_path, capsys, monkeypatch):
    import atoplab.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "train_classifier", boom)
    code, _, err = _run(capsys, "train-classifier", "--config", str(tiny_config), "--out-dir", str(tmp_path))
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["error_type"] == "RuntimeError"


def test_env_default_out_root(tiny_config, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ATOPLAB_OUT", str(tmp_path / "envroot"))
    code, out, _ = _run(capsys, "train-classifier", "--config", str(tiny_config))
    assert code == 0
    assert json.loads(out)["run_dir"].startswith(str(tmp_path / "envroot"))


def test_from_run_reuses_checkpoints(tiny_config, tmp_path, capsys):
    out_dir = str(tmp_path / "runs")
    base = ["--config", str(tiny_config), "--out-dir", out_dir]
    assert _run(capsys, "train-classifier", *base)[0] == 0
    first = json.loads(_run(capsys, "pretrain-purifier", *base)[1])["run_dir"]
    code, out, err = _run(capsys, "attack", *base, "--set", "attacks=[PGD-10]", "--kind", "RT1",
                          "--from-run", first)
    assert code == 0, err
    assert json.loads(out)["run_dir"] != first
