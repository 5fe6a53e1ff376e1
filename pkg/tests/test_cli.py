import csv

import pytest

from towerseg.cli import run
from towerseg.cloud_model import read_tile
from towerseg.workflow import ABLATION_HEADER

FAST = ["--epochs", "1", "--batch-size", "8", "--n-points", "256"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A three-block corpus, its windows and two one-epoch checkpoints."""
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--out", str(root / "corpus"), "--scenes", "3", "--extent", "120",
                "--density", "3", "--towers", "1", "--test-fraction", "0.2",
                "--val-fraction", "0.2", "--seed", "4"]) == 0
    assert run(["prep", "--corpus", str(root / "corpus"), "--out", str(root / "windows")]) == 0
    for task in ("cls", "seg"):
        assert run([f"train-{task}", "--windows", str(root / "windows"), "--out",
                    str(root / "models"), *FAST]) == 0
    return root


def test_train_writes_checkpoint_and_history(workspace):
    models = workspace / "models"
    for task in ("cls", "seg"):
        assert (models / f"{task}.ckpt").stat().st_size > 0
        rows = list(csv.reader((models / f"{task}_history.csv").open()))
        assert len(rows) == 2  # header plus one epoch


def test_infer_then_eval(workspace, capsys):
    pred = workspace / "pred"
    assert run(["infer", "--corpus", str(workspace / "corpus"), "--cls", str(workspace / "models/cls.ckpt"),
                "--seg", str(workspace / "models/seg.ckpt"), "--out", str(pred),
                "--n-points-cls", "256"]) == 0
    tiles = sorted(pred.glob("*.pct"))
    assert len(tiles) == 1
    truth = read_tile(workspace / "corpus" / tiles[0].name)
    assert len(read_tile(tiles[0])) == len(truth)
    report = workspace / "report.csv"
    assert run(["eval", "--pred", str(pred), "--truth", str(workspace / "corpus"),
                "--report", str(report)]) == 0
    assert "miou" in report.read_text()


def test_eval_identical_is_perfect(workspace, capsys):
    tile = next((workspace / "corpus").glob("*.pct"))
    report = workspace / "self.csv"
    assert run(["eval", "--pred", str(tile), "--truth", str(tile), "--report", str(report)]) == 0
    keys, values = list(csv.reader(report.open()))[-2:]
    row = dict(zip(keys, values))
    assert float(row["f1"]) == 1.0 and float(row["miou"]) == 1.0


def test_config_file_and_flags(workspace, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# options\nepochs = 1\nbatch_size = 8\nn_points = 256\nbeta = 0\n")
    assert run(["train-cls", "--windows", str(workspace / "windows"), "--config", str(cfg),
                "--out", str(tmp_path)]) == 0
    cfg.write_text("epochs = many\n")
    assert run(["train-cls", "--windows", str(workspace / "windows"), "--config", str(cfg),
                "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["synth", "--out", "/tmp/never", "--scenes", "3", "--test-fraction", "0.7"],
    ["eval", "--pred", "x"],
    ["train-cls", "--windows", "w", "--out", "o", "--bogus"],
    ["eval", "--pred", "/nonexistent.pct", "--truth", "/nonexistent.pct"],
    ["prep", "--corpus", "/nonexistent", "--out", "/tmp/never"],
    ["train-cls", "--windows", "/nonexistent", "--out", "/tmp/never", "--epochs", "0"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert run(argv) == 2
    assert capsys.readouterr().err


def test_bad_thread_env_is_usage_error(workspace, monkeypatch, capsys):
    monkeypatch.setenv("TOWERSEG_THREADS", "lots")
    tile = next((workspace / "corpus").glob("*.pct"))
    assert run(["eval", "--pred", str(tile), "--truth", str(tile)]) == 2
    assert "TOWERSEG_THREADS" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    out = capsys.readouterr().out
    for command in ("synth", "prep", "train-cls", "train-seg", "infer", "eval", "ablate"):
        assert command in out


def test_ablate_writes_table(workspace, tmp_path):
    out = tmp_path / "ablation.csv"
    assert run(["ablate", "--windows", str(workspace / "windows"), "--out", str(out), "--seeds", "0",
                *FAST]) == 0
    rows = list(csv.reader(out.open()))
    assert set(ABLATION_HEADER) <= set(rows[0])
    assert len(rows) == 1 + 5  # base, random sampling, no colour, two betas
