"""Command-line front end over a fixed workspace layout.

Every verb takes --config <path>, --seed <u64> (overrides the config seed),
and --out <dir>. Within the output directory:

    data/manifest.tsv, data/*.ssv      gen-data
    checkpoints/stage1_student.auap    train-stage1
    checkpoints/stage1_teacher.auap    train-stage1
    pseudo/manifest.tsv, pseudo/*.ssv  pseudo-label
    checkpoints/prototypes.auac        estimate-prototypes
    checkpoints/stage2.auap            train-stage2
    logs/stage1.jsonl, logs/stage2.jsonl
    metrics.json                       evaluate

Logs are one JSON object per line. evaluate prefers the stage-2 checkpoint
and falls back to the stage-1 student.
"""

import argparse
import dataclasses
import json
import os
import sys

from . import pipeline
from .contrastive import load_prototypes, save_prototypes
from .data import load_dataset, write_manifest, write_volume
from .network import load_checkpoint, save_checkpoint


def _load_cfg(args):
    cfg = pipeline.parse_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _jsonl_writer(path):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    f = open(path, "w")
    return f, lambda rec: (f.write(json.dumps(rec, sort_keys=True) + "\n"))


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    ds = pipeline.gen_dataset(cfg)
    data_dir = os.path.join(args.out, "data")
    os.makedirs(data_dir, exist_ok=True)
    rows = []
    for split in ("labeled", "unlabeled", "test"):
        for s in getattr(ds, split):
            rel = f"{s.id}.ssv"
            write_volume(os.path.join(data_dir, rel), s)
            rows.append((s.id, rel, split))
    write_manifest(os.path.join(data_dir, "manifest.tsv"), rows)
    print(f"wrote {len(rows)} volumes to {data_dir}")


def _dataset(args):
    return load_dataset(os.path.join(args.out, "data", "manifest.tsv"))


def _ckpt(args, name):
    return os.path.join(args.out, "checkpoints", name)


def cmd_train_stage1(args):
    cfg = _load_cfg(args)
    ds = _dataset(args)
    f, cb = _jsonl_writer(os.path.join(args.out, "logs", "stage1.jsonl"))
    try:
        student, teacher, _ = pipeline.train_stage1(cfg, ds, log_cb=cb)
    finally:
        f.close()
    os.makedirs(os.path.dirname(_ckpt(args, "x")), exist_ok=True)
    save_checkpoint(_ckpt(args, "stage1_student.auap"), student)
    save_checkpoint(_ckpt(args, "stage1_teacher.auap"), teacher)
    print(f"stage 1 done: {cfg.iterations} iterations")


def cmd_pseudo_label(args):
    cfg = _load_cfg(args)
    ds = _dataset(args)
    params = load_checkpoint(_ckpt(args, "stage1_student.auap"))
    pseudo = pipeline.generate_pseudo_labels(params, ds.unlabeled, cfg.crop,
                                             cfg.stride)
    pdir = os.path.join(args.out, "pseudo")
    os.makedirs(pdir, exist_ok=True)
    rows = []
    for s in pseudo:
        rel = f"{s.id}.ssv"
        write_volume(os.path.join(pdir, rel), s)
        rows.append((s.id, rel, "unlabeled"))
    write_manifest(os.path.join(pdir, "manifest.tsv"), rows)
    print(f"pseudo-labeled {len(rows)} volumes")


def _pseudo_samples(args):
    return load_dataset(os.path.join(args.out, "pseudo", "manifest.tsv")).unlabeled


def cmd_estimate_prototypes(args):
    cfg = _load_cfg(args)
    ds = _dataset(args)
    params = load_checkpoint(_ckpt(args, "stage1_student.auap"))
    protos = pipeline.estimate_prototypes(
        params, ds.labeled + _pseudo_samples(args), cfg)
    save_prototypes(_ckpt(args, "prototypes.auac"), protos)
    counts = {p.class_id: p.count for p in protos}
    print(f"prototypes frozen, per-class counts {counts}")


def cmd_train_stage2(args):
    cfg = _load_cfg(args)
    ds = _dataset(args)
    pseudo = _pseudo_samples(args)
    protos = (load_prototypes(_ckpt(args, "prototypes.auac"))
              if cfg.lambda_r > 0 else None)
    f, cb = _jsonl_writer(os.path.join(args.out, "logs", "stage2.jsonl"))
    try:
        params, _ = pipeline.train_stage2(cfg, ds.labeled, pseudo, protos,
                                          log_cb=cb)
    finally:
        f.close()
    save_checkpoint(_ckpt(args, "stage2.auap"), params)
    print(f"stage 2 done: {cfg.iterations} iterations")


def cmd_evaluate(args):
    cfg = _load_cfg(args)
    ds = _dataset(args)
    path = _ckpt(args, "stage2.auap")
    if not os.path.exists(path):
        path = _ckpt(args, "stage1_student.auap")
    params = load_checkpoint(path)
    result = pipeline.evaluate(params, ds.test, cfg)
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        f.write(pipeline.metrics_json(result))
    s = result["summary"]
    print(f"evaluated {len(result['cases'])} cases from {os.path.basename(path)}: "
          f"dice {s['dice_mean']:.4f} jaccard {s['jaccard_mean']:.4f}")


_VERBS = {
    "gen-data": cmd_gen_data,
    "train-stage1": cmd_train_stage1,
    "pseudo-label": cmd_pseudo_label,
    "estimate-prototypes": cmd_estimate_prototypes,
    "train-stage2": cmd_train_stage2,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="ambiseg",
        description="two-stage semi-supervised segmentation on synthetic volumes")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in _VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", required=True, help="workspace directory")
    args = parser.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    _VERBS[args.verb](args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
