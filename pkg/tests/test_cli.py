import csv
import io
import json

import pytest

from ngc.cli import main
from ngc.harness import ExperimentConfig

from test_replay import DEMO_GRID

TINY = {
    "n_keys": 4,
    "n_values": 4,
    "model": {"n_layers": 2, "n_heads": 2, "d_model": 16, "vocab_size": 49, "max_seq": 48},
    "eviction": {"cadence": 8, "rate": 0.5, "block_size": 2, "window": 1, "n_layers": 2},
    "task": {"pairs": 2, "filler": 1, "think": 4},
    "train": {"group_size": 2, "prompts_per_step": 1, "temperature": 1.5},
    "warmup_steps": 2,
    "rl_steps": 2,
    "eval_instances": 3,
    "eval_scorers": ["ngc", "streaming", "knorm"],
}


@pytest.fixture
def run_dir(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**TINY, "output_dir": str(tmp_path), "run_id": "r"}))
    return tmp_path, cfg


def test_selftest_exits_zero(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 5 and "FAIL" not in out


def test_inspect_masks_prints_demo_grid(capsys):
    assert main(["inspect-masks"]) == 0
    assert capsys.readouterr().out == DEMO_GRID + "\n"


def test_inspect_masks_pbm(capsys):
    assert main(["inspect-masks", "--format", "pbm"]) == 0
    assert capsys.readouterr().out.splitlines()[:2] == ["P1", "10 10"]


def test_train_then_sweep(run_dir, capsys):
    tmp, cfg = run_dir
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    out = tmp / "r"
    for name in ("model.ckpt", "metrics.csv", "warmup.csv", "config.json", "reward.svg"):
        assert (out / name).exists(), name
    assert len((out / "metrics.csv").read_text().splitlines()) == 1 + TINY["rl_steps"]
    capsys.readouterr()

    assert main(["sweep", "--config", str(cfg), "--eps", "0.25,0.5,0.75"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [(r["scorer"], r["eps"]) for r in rows] == [
        (s, e) for s in ("ngc", "streaming", "knorm") for e in ("0.25", "0.5", "0.75")
    ]
    first = (out / "eval.csv").read_text()
    assert (out / "accuracy.svg").exists() and (out / "peak_reduction.svg").exists()

    # identical config and seed give identical CSV bytes
    assert main(["sweep", "--config", str(cfg), "--eps", "0.25,0.5,0.75"]) == 0
    assert (out / "eval.csv").read_text() == first


def test_eval_uses_config_grid(run_dir, capsys):
    tmp, cfg = run_dir
    assert main(["train", "--config", str(cfg), "--quiet", "--set", "rl_steps=0", "--set", "warmup_steps=0"]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--set", "eval_eps=[0.5]", "--set", 'eval_scorers=["ngc"]']) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2


@pytest.mark.parametrize(
    "argv,code,category",
    [
        (["frobnicate"], 2, "usage"),
        (["selftest", "--nope"], 2, "usage"),
        (["sweep", "--eps", "0.5,x"], 2, "usage"),
        (["train", "--config", "/does/not/exist.json"], 3, "config"),
        (["train", "--set", "train.mode=ppo"], 3, "config"),
        (["eval", "--checkpoint", "/does/not/exist.ckpt"], 4, "checkpoint"),
    ],
)
def test_errors_have_categories(argv, code, category, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code
    assert capsys.readouterr().err.startswith(f"error[{category}]")


def test_checkpoint_config_mismatch(run_dir, capsys):
    tmp, cfg = run_dir
    assert main(["train", "--config", str(cfg), "--quiet", "--set", "rl_steps=0", "--set", "warmup_steps=0"]) == 0
    assert main(["eval", "--config", str(cfg), "--set", "model.d_model=32"]) == 4
    assert "does not match" in capsys.readouterr().err


def test_unknown_config_key_file(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({**ExperimentConfig().to_dict(), "extra": 1}))
    assert main(["train", "--config", str(path)]) == 3
    assert "unknown" in capsys.readouterr().err
