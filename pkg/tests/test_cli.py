import json
import os

import pytest

from main import cli
from settings import save_train_config


@pytest.fixture(autouse=True)
def no_data_dir(monkeypatch):
    monkeypatch.delenv("WEGA_DATA_DIR", raising=False)


@pytest.fixture
def dataset(tmp_path):
    out = str(tmp_path / "data")
    assert cli(["gen-data", "--out", out, "--patients", "20", "--seed", "7", "--min-nodes", "1",
                "--max-nodes", "4"]) == 0
    return out


def test_missing_data_is_a_usage_error(tmp_path, capsys):
    assert cli(["train", "--out", str(tmp_path / "m.ckpt")]) == 1
    err = capsys.readouterr().err
    assert "Usage" in err and "--data" in err


def test_unknown_flag_is_a_usage_error(capsys):
    assert cli(["gen-data", "--out", "x", "--bogus"]) == 1
    assert "Usage" in capsys.readouterr().err


def test_inverted_node_range_is_a_usage_error(tmp_path):
    assert cli(["gen-data", "--out", str(tmp_path), "--min-nodes", "5", "--max-nodes", "2"]) == 1


def test_unreadable_checkpoint_is_a_runtime_error(dataset, tmp_path, capsys):
    code = cli(["eval", "--data", dataset, "--model", str(tmp_path / "absent.ckpt"),
                "--report", str(tmp_path / "r.json")])
    assert code == 2
    assert "❌" in capsys.readouterr().err


def test_missing_dataset_is_a_runtime_error(tmp_path):
    assert cli(["heatmap", "--data", str(tmp_path / "nowhere"), "--model", "m.ckpt", "--patient", "P0000",
                "--out", str(tmp_path)]) == 2


def test_bad_config_is_a_usage_error(dataset, tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"epochs": 0}), encoding="utf-8")
    assert cli(["train", "--data", dataset, "--config", str(config), "--out", str(tmp_path / "m.ckpt")]) == 1


@pytest.mark.parametrize("data", [{"batch_size": "8"}, {"loss_weights": [1, 2]}])
def test_mistyped_config_is_a_usage_error(dataset, tmp_path, capsys, data):
    config = tmp_path / "mistyped.json"
    config.write_text(json.dumps(data), encoding="utf-8")
    assert cli(["train", "--data", dataset, "--config", str(config), "--out", str(tmp_path / "m.ckpt")]) == 1
    assert "--config" in capsys.readouterr().err
    assert not (tmp_path / "m.ckpt").exists()


def test_data_dir_from_environment(dataset, tmp_path, monkeypatch, mini_train_config):
    monkeypatch.setenv("WEGA_DATA_DIR", dataset)
    config = str(tmp_path / "config.json")
    save_train_config(mini_train_config, config)
    assert cli(["train", "--config", config, "--out", str(tmp_path / "m.ckpt")]) == 0


def test_end_to_end(dataset, tmp_path, mini_train_config):
    config = str(tmp_path / "config.json")
    save_train_config(mini_train_config, config)
    model = str(tmp_path / "model.ckpt")
    history = str(tmp_path / "history.json")

    assert cli(["train", "--data", dataset, "--config", config, "--out", model, "--history", history]) == 0
    records = json.load(open(history, encoding="utf-8"))
    assert {"epoch", "mil", "llp", "ral", "total", "val_auc"} <= set(records[0])

    report = str(tmp_path / "patients.json")
    assert cli(["eval", "--data", dataset, "--model", model, "--report", report, "--split", "all"]) == 0
    patient_report = json.load(open(report, encoding="utf-8"))
    assert patient_report["level"] == "patient" and patient_report["n_samples"] == 20

    node_report = str(tmp_path / "nodes.json")
    assert cli(["eval", "--data", dataset, "--model", model, "--report", node_report, "--split", "all",
                "--node-level", "--resamples", "100"]) == 0
    loaded = json.load(open(node_report, encoding="utf-8"))
    assert loaded["level"] == "node"
    assert 0.0 <= loaded["auc"]["point"] <= 1.0

    maps = str(tmp_path / "maps")
    assert cli(["heatmap", "--data", dataset, "--model", model, "--patient", "P0000", "--out", maps]) == 0
    assert any(name.startswith("P0000_node00") and name.endswith(".pgm") for name in os.listdir(maps))
    assert cli(["heatmap", "--data", dataset, "--model", model, "--patient", "P9999", "--out", maps]) == 2


def test_unknown_ablation_variant_is_a_usage_error(dataset, tmp_path, capsys):
    code = cli(["ablate", "--data", dataset, "--variants", "no_ral,no_head", "--report", str(tmp_path / "a.json")])
    assert code == 1
    assert "--variants" in capsys.readouterr().err
