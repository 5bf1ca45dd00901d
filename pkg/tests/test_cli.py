import csv
import json

import pytest

from mstpde.cli import (EXIT_INVALID, expand_values, file_sha256, main, parse_sweep,
                        read_metrics)
from mstpde.pde import read_dataset
from mstpde.scheduler import ModelBundle
from mstpde.tensor import load_weights

GEN = ["generate", "--pde", "heat", "--res", "16", "--train", "3", "--test", "2", "--T", "6",
       "--seed", "7"]
TRAIN = ["--epochs", "1", "--ae-epochs", "1", "--batch-size", "16", "--d-f", "4",
         "--layers", "1", "--heads", "2"]


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("MSTPDE_OUT", str(tmp_path))
    return tmp_path


@pytest.fixture
def dataset(out):
    assert main(GEN + ["--out", "d.mstd"]) == 0
    return out / "d.mstd"


def test_generate_round_trip_and_determinism(out, dataset):
    ds = read_dataset(dataset)
    assert len(ds.train) == 3 and len(ds.test) == 2 and ds.resolution == (16, 16)
    assert main(GEN + ["--out", "again.mstd"]) == 0
    assert file_sha256(dataset) == file_sha256(out / "again.mstd")


def test_generate_rejects_bad_resolution(out, capsys):
    assert main(["generate", "--pde", "heat", "--res", "48"]) == EXIT_INVALID
    assert "power of two" in capsys.readouterr().err
    assert not (out / "data").exists()


def test_unknown_flag_is_validation_error(out):
    assert main(["generate", "--bogus"]) == EXIT_INVALID
    assert main(["train", "--data", "x"]) == EXIT_INVALID


def test_config_file_with_flag_override(out, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("data:\n  pde: heat\n  resolution: 16\n  n_train: 1\n  n_test: 1\n  T: 3\n")
    assert main(["generate", "--config", str(cfg), "--T", "4", "--out", "c.mstd"]) == 0
    ds = read_dataset(out / "c.mstd")
    assert ds.train[0].T == 4 and ds.metadata["config"]["resolution"] == 16


def test_bad_config_file(out, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model: {}\n")
    assert main(["generate", "--config", str(cfg)]) == EXIT_INVALID


def test_two_stage_training(out, dataset):
    assert main(["train", "--stage", "dyn", "--data", "d.mstd", "--run", "r"] + TRAIN) == \
        EXIT_INVALID
    assert main(["train", "--stage", "ae", "--data", "d.mstd", "--run", "r"] + TRAIN) == 0
    assert main(["train", "--stage", "dyn", "--data", "d.mstd", "--run", "r", "--scales", "1,2",
                 "--rollout", "2"] + TRAIN) == 0
    run = out / "r"
    assert sorted(p.name for p in run.glob("*.mstw")) == ["cae.mstw", "dyn1.mstw", "dyn2.mstw"]
    records = read_metrics(run / "metrics.jsonl")
    assert [r["stage"] for r in records] == ["ae", "dyn1", "dyn2"]
    assert {"epoch", "lr", "train_loss", "val_loss", "config_hash", "seed"} <= set(records[0])
    _, meta = load_weights(run / "dyn2.mstw")
    assert meta["config_hash"] == records[-1]["config_hash"] and meta["seed"] == 0
    assert ModelBundle.load_components(run).scales == [1, 2]


def test_training_rejects_long_rollout(out, dataset):
    assert main(["train", "--data", "d.mstd", "--run", "r", "--rollout", "4", "--scales", "1,2"]
                + TRAIN) == EXIT_INVALID


def test_training_reproducible(out, dataset):
    for name in ("a", "b"):
        assert main(["train", "--data", "d.mstd", "--run", name, "--scales", "1"] + TRAIN) == 0
    assert (out / "a" / "metrics.jsonl").read_text() == (out / "b" / "metrics.jsonl").read_text()
    assert file_sha256(out / "a" / "dyn1.mstw") == file_sha256(out / "b" / "dyn1.mstw")


def test_eval_stub_and_bundle(out, dataset):
    assert main(["eval", "--run", "r", "--data", "d.mstd", "--horizon", "4", "--stub",
                 "truth"]) == 0
    summary = json.loads((out / "r" / "eval" / "summary.json").read_text())
    assert summary["mean"] == 0.0
    with open(out / "r" / "eval" / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 4 and rows[0].keys() == {"sample_id", "step", "nrmse"}

    assert main(["train", "--data", "d.mstd", "--run", "r", "--scales", "1,2"] + TRAIN) == 0
    assert main(["eval", "--run", "r", "--data", "d.mstd", "--horizon", "5", "--plots"]) == 0
    summary = json.loads((out / "r" / "eval" / "summary.json").read_text())
    assert summary["passes"] == {"1": 3, "2": 6} and summary["config_hash"]
    assert (out / "r" / "eval" / "error_curve.png").exists()
    assert (out / "r" / "eval" / "fields.png").exists()
    assert main(["report", "--run", "r"]) == 0
    assert "dyn2" in (out / "r" / "report" / "report.md").read_text()


def test_eval_horizon_too_long(out, dataset):
    assert main(["eval", "--run", "r", "--data", "d.mstd", "--horizon", "6", "--stub",
                 "zero"]) == EXIT_INVALID


def test_sweep(out, dataset):
    assert main(["train", "--stage", "ae", "--data", "d.mstd", "--run", "r", "--scales", "1"]
                + TRAIN) == 0
    assert main(["eval", "--run", "r", "--data", "d.mstd", "--horizon", "3", "--plots",
                 "--sweep", "variant=M0,M4", "rollout=1,2"]) == 0
    grid = json.loads((out / "r" / "sweep" / "grid.json").read_text())
    assert len(grid) == 4 and {g["variant"] for g in grid} == {"M0", "M4"}
    assert (out / "r" / "sweep" / "grid.png").exists()


def test_sweep_parsing():
    assert expand_values("M0..M4") == ["M0", "M1", "M2", "M3", "M4"]
    assert expand_values("1,2,4") == ["1", "2", "4"]
    assert parse_sweep(["variant=M3..M4", "rollout=1..2"]) == {"variant": ["M3", "M4"],
                                                                "rollout": [1, 2]}
    with pytest.raises(ValueError):
        parse_sweep(["depth=3"])


def test_runtime_failure_exit_code(out, dataset):
    (out / "r").mkdir()
    (out / "r" / "cae.mstw").write_bytes(b"MSTW" + b"\0" * 4)
    assert main(["eval", "--run", "r", "--data", "d.mstd", "--horizon", "2"]) == EXIT_INVALID


def test_ae_section_overrides_autoencoder_stage_only(out, dataset, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  epochs: 2\n  batch_size: 16\n  delta_ts: [1]\n  d_f: 4\n"
                   "  n_layers: 1\n  n_heads: 2\nae:\n  epochs: 1\n  lr0: 0.002\n  augment: true\n")
    assert main(["train", "--config", str(cfg), "--data", "d.mstd", "--run", "r"]) == 0
    saved = json.loads((out / "r" / "config.json").read_text())
    assert saved["ae"]["epochs"] == 1 and saved["ae"]["augment"] is True
    assert saved["train"]["epochs"] == 2 and saved["train"]["lr0"] == 0.001
    stages = [r["stage"] for r in read_metrics(out / "r" / "metrics.jsonl")]
    assert stages == ["ae", "dyn1", "dyn1"]
    cfg.write_text("ae:\n  epochs: -1\n")
    assert main(["train", "--config", str(cfg), "--data", "d.mstd", "--run", "r"]) == EXIT_INVALID
