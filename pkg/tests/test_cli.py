import json
import subprocess
import sys

import numpy as np
import pytest

from inpaint_swap.cli import DATA_ENV, compose_grid, main
from inpaint_swap.toy.dataset import read_image

TINY = {
    "base_channels": 8,
    "channel_mult": [1, 2],
    "context_dim": 16,
    "semantic_dim": 16,
    "identity_dim": 8,
    "pretrain_pool": 32,
    "semantic_steps": 2,
    "identity_steps": 2,
    "oracle_steps": 2,
    "oracle_pool": 16,
    "epochs": 1,
    "batch_size": 8,
    "cross_batch_size": 2,
    "lr": 1e-3,
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """gen-data + train once for the whole module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--identities", "4", "--per-identity", "6", "--size", "16"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(root / "train"), "--seed", "1"]) == 0
    return root


def test_gen_data_echo_and_refuses_overwrite(run, capsys):
    echo = json.loads((run / "data" / "command.json").read_text())
    assert echo["command"] == "gen-data" and echo["args"]["identities"] == 4
    assert main(["gen-data", "--out", str(run / "data")]) == 1
    assert "already exists" in capsys.readouterr().err


def test_train_echoes_config_with_flag_override(run):
    echo = json.loads((run / "train" / "command.json").read_text())
    assert echo["config"]["seed"] == 1  # flag wins over the file default
    assert echo["config"]["context_dim"] == 16
    for name in ("checkpoint.pt", "featurizers.pt", "report.jsonl", "config.json"):
        assert (run / "train" / name).is_file()


def test_swap_headswap_eval_grid(run, monkeypatch):
    monkeypatch.setenv(DATA_ENV, str(run / "data"))
    ckpt = str(run / "train" / "checkpoint.pt")
    assert main(["swap", "--checkpoint", ckpt, "--out", str(run / "swap"), "--n-pairs", "4", "--steps", "3"]) == 0
    assert main(["headswap", "--checkpoint", ckpt, "--out", str(run / "head"), "--n-pairs", "4", "--steps", "3"]) == 0
    rows = [json.loads(l) for l in (run / "swap" / "manifest.jsonl").read_text().splitlines()]
    head_rows = [json.loads(l) for l in (run / "head" / "manifest.jsonl").read_text().splitlines()]
    assert len(rows) == 4 and all(r["status"] == "ok" for r in rows)
    assert {r["preset"] for r in head_rows} == {"head"}
    assert [r["source"] for r in rows] == [r["source"] for r in head_rows]

    assert main(["eval", "--checkpoint", ckpt, "--out", str(run / "eval"), "--n-pairs", "8", "--steps", "3", "--extra-steps", "2"]) == 0
    report = json.loads((run / "eval" / "eval_report.json").read_text())
    assert report["n_pairs"] == 8 and set(report["background_mae"]) == {"3", "2"}
    assert (run / "eval" / "command.json").is_file()

    assert main(["grid", "--run", str(run / "swap")]) == 0
    grid = read_image(run / "swap" / "grid.png")
    assert grid.shape == (3, 4 * 18 + 2, 3 * 18 + 2)


def test_swap_explicit_files(run):
    data = run / "data"
    ckpt = str(run / "train" / "checkpoint.pt")
    files = lambda i: [data / "images" / f"{i:05d}.png", data / "labels" / f"{i:05d}.png", data / "landmarks" / f"{i:05d}.txt"]
    s, t = files(0), files(7)
    args = ["swap", "--checkpoint", ckpt, "--out", str(run / "one"), "--steps", "2",
            "--source", str(s[0]), "--source-labels", str(s[1]),
            "--target", str(t[0]), "--target-labels", str(t[1]), "--target-landmarks", str(t[2])]
    assert main(args) == 0
    rows = [json.loads(l) for l in (run / "one" / "manifest.jsonl").read_text().splitlines()]
    assert rows[0]["source"] == str(s[0]) and rows[0]["status"] == "ok"


def test_swap_missing_checkpoint_exit_2(tmp_path, capsys):
    missing = tmp_path / "absent.pt"
    assert main(["swap", "--checkpoint", str(missing), "--out", str(tmp_path / "o"), "--data", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_usage_errors_exit_1(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(DATA_ENV, raising=False)
    assert main([]) == 1
    assert main(["train"]) == 1  # --out required
    assert main(["swap", "--checkpoint", "x", "--out", "y", "--steps", "0"]) == 1
    assert main(["swap", "--checkpoint", "x", "--out", "y", "--preset", "torso"]) == 1
    assert main(["train", "--out", str(tmp_path)]) == 1  # no data root
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense_key": 1}))
    assert main(["train", "--config", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "r")]) == 1
    assert "nonsense_key" in capsys.readouterr().err


def test_runtime_error_exit_2(tmp_path):
    # data directory without a manifest
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "r")]) == 2


def test_compose_grid_layout():
    a = np.zeros((3, 4, 4), np.float32)
    b = np.full((3, 4, 4), 0.5, np.float32)
    g = compose_grid([(a, b, a), (b, a, b)], pad=1)
    assert g.shape == (3, 2 * 5 + 1, 3 * 5 + 1)
    assert np.all(g[:, 1:5, 1:5] == 0) and np.all(g[:, 1:5, 6:10] == 0.5)
    assert np.all(g[:, 0, :] == 1)
    with pytest.raises(ValueError):
        compose_grid([])


def test_console_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "inpaint_swap.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
    out = subprocess.run([sys.executable, "-m", "inpaint_swap.cli", "swap"], capture_output=True, text=True)
    assert out.returncode == 1 and "required" in out.stderr


def test_shipped_toy_config_matches_preset():
    from pathlib import Path

    from inpaint_swap.config import TOY_PRESET, TrainConfig, load_config

    path = Path(__file__).resolve().parents[1] / "configs" / "toy.json"
    assert load_config(path) == TrainConfig(**TOY_PRESET).validate()
