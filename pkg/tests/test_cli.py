"""End-to-end command-line workflow on a miniature configuration."""

import json
import os

import numpy as np
import pytest

from ambiseg import cli, pipeline
from ambiseg.contrastive import load_prototypes
from ambiseg.network import load_checkpoint


def _write_tiny_config(path):
    cfg = pipeline.TrainConfig(
        seed=5, iterations=3, volumes=4, volume_shape=(16, 16, 16),
        labeled_count=1, unlabeled_count=2, test_count=1,
        crop=(8, 8, 8), stride=(8, 8, 8), S=2, r=2, nb_cap=8, proto_iters=3)
    pipeline.write_config(path, cfg)
    return cfg


def _run_all(cfgfile, out):
    for verb in ("gen-data", "train-stage1", "pseudo-label",
                 "estimate-prototypes", "train-stage2", "evaluate"):
        assert cli.main([verb, "--config", cfgfile, "--out", out]) == 0


def test_full_workflow_produces_artifacts(tmp_path, capsys):
    cfgfile = str(tmp_path / "tiny.cfg")
    out = str(tmp_path / "run")
    _write_tiny_config(cfgfile)
    _run_all(cfgfile, out)
    capsys.readouterr()

    assert os.path.exists(os.path.join(out, "data", "manifest.tsv"))
    assert os.path.exists(os.path.join(out, "checkpoints", "stage1_student.auap"))
    assert os.path.exists(os.path.join(out, "checkpoints", "stage1_teacher.auap"))
    assert os.path.exists(os.path.join(out, "pseudo", "manifest.tsv"))
    assert os.path.exists(os.path.join(out, "checkpoints", "prototypes.auac"))
    assert os.path.exists(os.path.join(out, "checkpoints", "stage2.auap"))
    assert os.path.exists(os.path.join(out, "metrics.json"))

    with open(os.path.join(out, "logs", "stage1.jsonl")) as f:
        lines = [json.loads(l) for l in f]
    assert len(lines) == 3
    assert lines[0]["iteration"] == 0

    with open(os.path.join(out, "metrics.json")) as f:
        metrics = json.load(f)
    assert len(metrics["cases"]) == 1
    assert "dice_mean" in metrics["summary"]

    protos = load_prototypes(os.path.join(out, "checkpoints", "prototypes.auac"))
    assert [p.class_id for p in protos] == [0, 1]


def test_identical_seeds_give_identical_artifacts(tmp_path, capsys):
    cfgfile = str(tmp_path / "tiny.cfg")
    _write_tiny_config(cfgfile)
    outs = [str(tmp_path / "a"), str(tmp_path / "b")]
    for out in outs:
        _run_all(cfgfile, out)
    capsys.readouterr()
    for rel in (os.path.join("checkpoints", "stage1_student.auap"),
                os.path.join("checkpoints", "stage2.auap"),
                os.path.join("checkpoints", "prototypes.auac"),
                "metrics.json"):
        a = open(os.path.join(outs[0], rel), "rb").read()
        b = open(os.path.join(outs[1], rel), "rb").read()
        assert a == b, rel


def test_seed_flag_overrides_config(tmp_path, capsys):
    cfgfile = str(tmp_path / "tiny.cfg")
    _write_tiny_config(cfgfile)
    out1, out2 = str(tmp_path / "s1"), str(tmp_path / "s2")
    for out, seed in ((out1, "5"), (out2, "6")):
        assert cli.main(["gen-data", "--config", cfgfile,
                         "--seed", seed, "--out", out]) == 0
    capsys.readouterr()
    a = open(os.path.join(out1, "data", "sample_000.ssv"), "rb").read()
    b = open(os.path.join(out2, "data", "sample_000.ssv"), "rb").read()
    assert a != b


def test_evaluate_falls_back_to_stage1_checkpoint(tmp_path, capsys):
    cfgfile = str(tmp_path / "tiny.cfg")
    out = str(tmp_path / "run")
    _write_tiny_config(cfgfile)
    for verb in ("gen-data", "train-stage1", "evaluate"):
        assert cli.main([verb, "--config", cfgfile, "--out", out]) == 0
    captured = capsys.readouterr()
    assert "stage1_student.auap" in captured.out
    assert os.path.exists(os.path.join(out, "metrics.json"))


def test_unknown_verb_is_rejected():
    with pytest.raises(SystemExit):
        cli.main(["definitely-not-a-verb", "--config", "x", "--out", "y"])
