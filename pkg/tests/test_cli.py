import csv
import json
import struct

import numpy as np
import pytest

from spikeplast.cli import main

FAST = ["--set", "network.fc_neurons=12", "--set", "network.timesteps=20",
        "--set", "network.theta_init=0.5", "--set", "network.gamma=2"]


def _write_idx(d, prefix, n, rng):
    images = (rng.random((n, 28, 28)) < 0.2).astype(np.uint8) * 255
    labels = np.arange(n) % 10
    (d / f"{prefix}-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x803, n, 28, 28) + images.tobytes())
    (d / f"{prefix}-labels-idx1-ubyte").write_bytes(
        struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes())


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    rng = np.random.default_rng(0)
    _write_idx(root, "train", 30, rng)
    _write_idx(root, "t10k", 20, rng)
    return root


@pytest.fixture(scope="module")
def trained_run(data_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--dataset", "mnist", "--data-root", str(data_root), "--out", str(out),
                 "--per-class", "2", "--seed", "1", *FAST])
    return code, out


def test_train_writes_artifacts(trained_run, capsys):
    code, out = trained_run
    assert code == 0
    assert (out / "checkpoint.spk").exists()
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert {r["split"] for r in rows} == {"train", "test"}
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["per_class"] == 2
    assert summary["network"]["fc_neurons"] == 12
    confusion = list(csv.reader((out / "confusion_test.csv").open()))
    assert len(confusion) == 11


def test_eval_checkpoint(trained_run, data_root, tmp_path, capsys):
    _, out = trained_run
    code = main(["eval", "--checkpoint", str(out / "checkpoint.spk"), "--dataset", "mnist",
                 "--data-root", str(data_root), "--out", str(tmp_path), "--split", "train"])
    assert code == 0
    assert "train accuracy" in capsys.readouterr().out
    assert (tmp_path / "confusion_train.csv").exists()


def test_eval_shape_mismatch_exits_2(trained_run, tmp_path, capsys):
    _, out = trained_run
    root = tmp_path / "cifar"
    root.mkdir()
    rec = np.zeros((2, 3073), np.uint8)
    (root / "test_batch.bin").write_bytes(rec.tobytes())
    code = main(["eval", "--checkpoint", str(out / "checkpoint.spk"), "--dataset", "cifar10",
                 "--data-root", str(root), "--out", str(tmp_path)])
    assert code == 2


def test_corrupt_checkpoint_exits_1(trained_run, data_root, tmp_path, capsys):
    _, out = trained_run
    bad = tmp_path / "bad.spk"
    blob = bytearray((out / "checkpoint.spk").read_bytes())
    blob[40] ^= 0xFF
    bad.write_bytes(bytes(blob))
    code = main(["eval", "--checkpoint", str(bad), "--dataset", "mnist",
                 "--data-root", str(data_root), "--out", str(tmp_path)])
    assert code == 1
    assert "bad header" in capsys.readouterr().err


def test_export_weights(trained_run, tmp_path):
    _, out = trained_run
    assert main(["export-weights", "--checkpoint", str(out / "checkpoint.spk"),
                 "--out", str(tmp_path), "--max-fc", "3"]) == 0
    assert len(list((tmp_path / "conv").glob("*.pgm"))) == 12
    fc = sorted((tmp_path / "fc").glob("*.pgm"))
    assert len(fc) == 3 and all(p.read_bytes().startswith(b"P5") for p in fc)


def test_ablate_and_small_sample(data_root, tmp_path):
    common = ["--dataset", "mnist", "--data-root", str(data_root), *FAST,
              "--set", "network.epochs_fc=1"]
    assert main(["ablate", *common, "--out", str(tmp_path / "a"), "--per-class", "1",
                 "--sets", "asf", "asf+alic"]) == 0
    labels = {r["label"] for r in csv.DictReader((tmp_path / "a" / "ablation.csv").open())}
    assert len(labels) == 3
    assert main(["small-sample", *common, "--out", str(tmp_path / "s"), "--sizes", "1",
                 "--seeds", "2"]) == 0
    rows = list(csv.DictReader((tmp_path / "s" / "small_sample.csv").open()))
    assert len(rows) == 2


def test_config_file_and_overrides(data_root, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"network.fc_neurons": 12, "network.timesteps": 20,
                               "network.theta_init": 0.5, "network.gamma": 2,
                               "per_class": 1, "seed": 4}))
    out = tmp_path / "o"
    assert main(["train", "--dataset", "mnist", "--data-root", str(data_root),
                 "--config", str(cfg), "--out", str(out), "--seed", "7"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["seed"] == 7 and summary["config"]["per_class"] == 1


@pytest.mark.parametrize("argv", [
    ["train", "--dataset", "mnist", "--data-root", "/nonexistent/path"],
    ["train", "--dataset", "mnist", "--set", "network.bogus=1"],
    ["train", "--dataset", "mnist", "--set", "colour=red"],
    ["train", "--dataset", "mnist", "--set", "network.kernel=0"],
    ["train", "--dataset", "mnist", "--set", "seed=-1"],
    ["train", "--dataset", "mnist", "--config", "/nonexistent.json"],
    ["train", "--dataset", "imagenet"],
    ["frobnicate"],
])
def test_configuration_errors_exit_2(argv, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SPIKEPLAST_DATA", raising=False)
    assert main([*argv, "--out", str(tmp_path)] if argv[0] == "train" else argv) == 2


def test_missing_checkpoint_exits_2(tmp_path):
    assert main(["export-weights", "--checkpoint", str(tmp_path / "x.spk"),
                 "--out", str(tmp_path)]) == 2


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.strip().startswith("spikeplast")
