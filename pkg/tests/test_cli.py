import json

import numpy as np
import pytest
import yaml

from forada.cli import main
from forada.config import dump

from .conftest import tiny_config


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """synth -> prepare -> train once at the tiny config; yields the work dir."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.yaml"
    dump(tiny_config("steps=3", "checkpoint_every=2", mode="forada++"), cfg_path)
    assert main(["synth", "--out", str(root / "raw"), "--n", "6", "--seed", "1"]) == 0
    assert main(["prepare", str(root / "raw"), "--out", str(root / "prep"), "--config", str(cfg_path)]) == 0
    assert main(["train", "--manifest", str(root / "prep" / "manifest.jsonl"), "--out", str(root / "ckpt"),
                 "--config", str(cfg_path), "--log-every", "1"]) == 0
    return root


def test_train_outputs(run):
    ckpt = run / "ckpt"
    assert {"last.safetensors", "step_000000.safetensors", "step_000002.safetensors",
            "train_log.jsonl", "resolved_config.yaml", "command.json"} <= {p.name for p in ckpt.iterdir()}
    assert len((ckpt / "train_log.jsonl").read_text().splitlines()) == 3
    snap = yaml.safe_load((ckpt / "resolved_config.yaml").read_text())
    assert snap["mode"] == "forada++" and snap["steps"] == 3
    assert (run / "prep" / "resolved_config.yaml").exists()
    assert (run / "prep" / "prepare_problems.txt").read_text() == ""


def test_eval_writes_report_csv_and_embeddings(run, capsys):
    out = run / "eval"
    code = main(["eval", "--checkpoint", str(run / "ckpt" / "last.safetensors"),
                 "--manifest", str(run / "prep" / "manifest.jsonl"), "--out", str(out), "--name", "synth",
                 "--perturb", "noise", "--levels", "0", "2", "--embeddings"])
    assert code == 0
    report = json.loads((out / "synth_report.json").read_text())
    assert 0 <= report["frame"]["auc"] <= 1 and report["meta"]["step"] == 3
    assert report["perturbations"]["noise"]["0"]["frame"] == report["frame"]
    emb = np.load(out / "synth_embeddings.npy")
    assert emb.shape[0] == 12
    assert len((out / "synth_scores.csv").read_text().splitlines()) == 13
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["frame"] == report["frame"]


def test_perturb_sweep(run):
    out = run / "sweep"
    assert main(["perturb-sweep", "--checkpoint", str(run / "ckpt" / "last.safetensors"),
                 "--manifest", str(run / "prep" / "manifest.jsonl"), "--out", str(out),
                 "--kinds", "jpeg", "block"]) == 0
    report = json.loads((out / "perturb_sweep_report.json").read_text())
    assert sorted(report["perturbations"]) == ["block", "jpeg"]
    assert sorted(report["perturbations"]["jpeg"]) == ["0", "1", "2", "3", "4", "5"]


def test_score_directory_is_repeatable(run, capsys):
    frames = run / "raw" / "fake"
    args = ["score", "--checkpoint", str(run / "ckpt" / "last.safetensors"), str(frames), "--heatmaps"]
    assert main(args + ["--out", str(run / "s1")]) == 0
    assert main(args + ["--out", str(run / "s2")]) == 0
    a = json.loads((run / "s1" / "scores.json").read_text())["scores"]
    b = json.loads((run / "s2" / "scores.json").read_text())["scores"]
    assert len(a) == 6 and [r["score"] for r in a] == [r["score"] for r in b]
    assert all(0 <= r["score"] <= 1 for r in a)
    assert all((run / "s1" / "heatmaps").joinpath(r["heatmap"].rsplit("/", 1)[1]).exists() for r in a)


def test_score_unreadable_file_exit_code(run, tmp_path):
    bad = tmp_path / "frames"
    bad.mkdir()
    (bad / "broken.png").write_bytes(b"not an image")
    code = main(["score", "--checkpoint", str(run / "ckpt" / "last.safetensors"), str(bad),
                 "--out", str(tmp_path / "out")])
    assert code == 2
    assert json.loads((tmp_path / "out" / "scores.json").read_text())["failures"][0]["file"].endswith("broken.png")


def test_inspect(run, capsys):
    assert main(["inspect", str(run / "ckpt" / "last.safetensors")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["step"] == 3 and info["mode"] == "forada++"
    assert main(["inspect", str(run / "prep" / "manifest.jsonl")]) == 0
    assert json.loads(capsys.readouterr().out) == {"records": 12, "fake": 6, "videos": 12}
    assert main(["inspect", "--preset", "default", "--set", "mode=forada++"]) == 0
    counts = json.loads(capsys.readouterr().out)["trainable_parameters"]
    assert 0.85 * 5.7e6 <= counts["total"] <= 1.15 * 5.7e6


def test_prepare_empty_directory_exits_zero(tmp_path):
    (tmp_path / "raw").mkdir()
    assert main(["prepare", str(tmp_path / "raw"), "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "manifest.jsonl").exists()


def test_config_errors_exit_one(tmp_path):
    assert main(["inspect", "--set", "adapter.bogus=1"]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "none.safetensors"), "--manifest", "m.jsonl",
                 "--out", str(tmp_path)]) == 1
