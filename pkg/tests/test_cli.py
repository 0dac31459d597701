import csv

import numpy as np
import pytest

from fineformer.cli import main
from fineformer.training import Checkpoint, read_metrics_csv

FAST = ["--set", "data.train_per_class=20", "--set", "data.test_per_class=10", "--set", "model.layers=1",
        "--set", "train.epochs=2", "--set", "train.lr=0.05"]


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_train_eval_pipeline(tmp_path, capsys):
    out = tmp_path / "run"
    assert run("gen-data", "--out", out, *FAST) == 0
    assert (out / "dataset.ffds").exists() and (out / "resolved.ini").exists()
    assert run("train", "--out", out, *FAST) == 0
    history = read_metrics_csv(out / "metrics.csv")
    assert [r.epoch for r in history] == [1, 2]
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,lr,train_loss,top1,mean_class_acc"

    ckpt_bytes = (out / "final.ffck").read_bytes()
    capsys.readouterr()
    assert run("eval", "--out", out, *FAST) == 0
    printed = capsys.readouterr().out
    assert (out / "final.ffck").read_bytes() == ckpt_bytes
    with open(out / "eval.csv") as f:
        rows = list(csv.reader(f))
    assert float(rows[1][1]) == history[-1].top1
    assert float(rows[2][1]) == history[-1].mean_class_acc
    assert f"top1={100 * history[-1].top1:.2f}" in printed


def test_reruns_are_byte_identical(tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("gen-data", "--out", out, *FAST) == 0
        assert run("train", "--out", out, *FAST) == 0
        assert run("eval", "--out", out, *FAST) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outputs[0].keys() == outputs[1].keys()
    for key in outputs[0]:
        assert outputs[0][key] == outputs[1][key], key


def test_resume_flag(tmp_path):
    argv = ["--set", "data.train_per_class=10", "--set", "data.test_per_class=4", "--set", "model.layers=1",
            "--set", "train.epochs=3", "--set", "train.save_every=1"]
    assert run("train", "--out", tmp_path / "full", *argv) == 0
    assert run("train", "--out", tmp_path / "part", "--resume", tmp_path / "full" / "epoch_0001.ffck", *argv) == 0
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()


def test_untrained_model_is_at_chance(tmp_path, capsys):
    out = tmp_path / "chance"
    assert run("train", "--out", out, "--set", "train.epochs=0") == 0
    assert run("eval", "--out", out) == 0
    with open(out / "eval.csv") as f:
        top1 = float(list(csv.reader(f))[1][1])
    counts = Checkpoint.load(out / "final.ffck")
    assert counts.epoch == 0
    assert abs(top1 - 1 / 16) <= 0.05


def test_attn_report(tmp_path, capsys):
    out = tmp_path / "cross"
    argv = ["--set", "model.arch=cross", "--set", "data.train_per_class=5", "--set", "data.test_per_class=5",
            "--set", "train.epochs=1", "--set", "train.optimizer=adamw", "--set", "train.lr=1e-3"]
    assert run("train", "--out", out, *argv) == 0
    assert run("attn-report", "--out", out, *argv) == 0
    lines = (out / "attention.csv").read_text().splitlines()
    assert lines[0].startswith("attribute,t0,") and lines[0].endswith("t7,match_ratio")
    assert len(lines) == 1 + 12 + 1
    assert lines[-1].startswith("summary,")
    matrix = np.array([[float(v) for v in line.split(",")[1:9]] for line in lines[1:13]])
    assert matrix.shape == (12, 8) and np.all(matrix.sum(1) <= 1 + 1e-12)


def test_attn_report_needs_cross_checkpoint(tmp_path, capsys):
    out = tmp_path / "vision"
    assert run("train", "--out", out, "--set", "train.epochs=0") == 0
    assert run("attn-report", "--out", out) == 1
    assert "cross-encoder" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 1
    assert run("train", "--set", "train.lr=abc", "--out", tmp_path) == 1
    assert run("eval", "--out", tmp_path / "empty") == 1
    assert run("train", "--config", tmp_path / "missing.ini") == 1
    assert run("train", "--resume", tmp_path / "nope.ffck", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert err.count("fineformer: error:") >= 4


def test_gradcheck_command(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert out.strip().splitlines()[-1].endswith("gradient checks passed")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exit_code(tmp_path, capsys):
    code = run("train", "--out", tmp_path, "--set", "train.lr=1e12", "--set", "train.clip_norm=0",
               "--set", "train.weight_decay=0", "--set", "data.train_per_class=20", "--set", "train.epochs=3",
               "--set", "train.schedule=fixed_step")
    assert code == 2
    assert "numerical failure" in capsys.readouterr().err
