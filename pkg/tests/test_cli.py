import json
import subprocess
import sys

import pytest

from ksfusion import data
from ksfusion.cli import main

GEN = ["generate", "--n-samples", "40", "--n-tumour", "10", "--n-tme", "20", "--grid", "3x3", "--channels", "4"]
MODEL = ["--grid", "3x3", "--embed-dim", "8", "--heads", "2", "--hidden", "8", "--epochs", "1"]


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(GEN + ["--out", str(out)]) == 0
    return out


def test_generate_writes_dataset(dataset):
    ds = data.load(dataset)
    assert len(ds) == 40 and ds.grid_shape == (3, 3, 4)


def test_train_then_evaluate(dataset, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(run), *MODEL]) == 0
    trained = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert {p.name for p in run.iterdir()} == {"metrics.csv", "model.sfck", "config.json"}
    config = json.loads((run / "config.json").read_text())
    assert config["fusion"]["grid"] == [3, 3] and config["alpha"] == 0.5 and config["batch_size"] == 8

    assert main(["evaluate", "--checkpoint", str(run / "model.sfck"), "--data", str(dataset)]) == 0
    assert json.loads(capsys.readouterr().out) == trained


def test_ablation_flags(dataset, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(run), "--no-ge-con", "--no-cg-coord", *MODEL]) == 0
    config = json.loads((run / "config.json").read_text())
    assert config["ge_con_enabled"] is False and config["cg_coord_enabled"] is False


def test_ablate_command(dataset, tmp_path, capsys):
    assert main(["ablate", "--data", str(dataset), "--out", str(tmp_path / "ab"), "--seeds", "0", *MODEL]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["variant"] for r in rows] == ["full", "no_ge_con", "no_cg_coord"]
    assert (tmp_path / "ab" / "ablation.csv").exists()


def test_config_error_exit_code(dataset, tmp_path, capsys):
    assert main(["train", "--data", str(dataset), "--alpha", "2", *MODEL]) == 2
    assert main(["train", "--data", str(dataset), "--grid", "7x7", "--epochs", "1"]) == 2
    assert main(["generate", "--out", str(tmp_path / "x"), "--conflict", "3"]) == 2
    assert "config error" in capsys.readouterr().err


def test_data_format_exit_code(dataset, capsys):
    (dataset / "patches.bin").write_bytes(b"SFPG")
    assert main(["train", "--data", str(dataset), *MODEL]) == 3
    assert "patches.bin" in capsys.readouterr().err


def test_missing_dataset_exit_code(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), *MODEL]) == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ksfusion", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "generate" in out.stdout
