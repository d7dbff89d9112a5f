"""Two-stage semi-supervised training on synthetic ambiguous volumes.

Stage 1 trains a student with three terms: the Monte-Carlo aleatoric
supervised loss on labeled crops, the ramped energy-distance consistency
between student and EMA-teacher sample sets on unlabeled crops, and the
boundary contrastive loss on labeled crops. Stage 2 re-initializes a fresh
network and trains on true + pseudo labels with mean cross-entropy + soft
Dice, plus the prototype contrastive loss against frozen stage-1 prototypes.

Printed-formula operations return voxel/pair sums; this module scales them
(1/V, 1/S^2, 1/|NB|) when combining so the pinned optimizer settings
(lr 0.01, momentum 0.9) behave at any crop size.

Per-purpose RNG streams are derived as PCG64(SeedSequence([seed, k])), so
disabling one loss term leaves every other stream's draws untouched; a run
with lambda_g_max = 0 and lambda_c = 0 is bit-identical to a supervised-only
run on the labeled split alone.
"""

import dataclasses
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .consistency import RampSchedule, aua_loss, ged_consistency, ramp_weight
from .contrastive import (bcl_loss, extract_boundary, freeze_prototypes,
                          new_prototypes, pcl_loss, sample_boundary_pixels,
                          update_prototypes)
from .data import (Dataset, VolumeSample, generate_sample, random_crop,
                   random_flip, random_rot90)
from .lowrank import (build_distribution, sample_probability_maps,
                      supervised_loss_au)
from .metrics import SurfaceUndefinedError, dice, jaccard, surface_distances
from .network import as_leaves, forward, init_params
from .teacher import ema_update, perturb_input
from .tensor import (Tape, Tensor, add, log_softmax, mul, neg, reshape,
                     softmax, stack, sub, transpose, tsum)

NUM_CLASSES = 2


# -- configuration ---------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 600
    lr: float = 0.01
    lr_decay: float = 0.1
    lr_step: int = 250
    momentum: float = 0.9
    weight_decay: float = 1e-4
    labeled_batch: int = 2
    unlabeled_batch: int = 2
    crop: tuple = (16, 16, 16)
    S: int = 8
    r: int = 5
    lambda_g_max: float = 0.15
    lambda_c: float = 0.01
    lambda_r: float = 0.1
    tau1: float = 0.07
    tau2: float = 100.0
    ema_decay: float = 0.99
    noise_std: float = 0.1
    noise_clip: float = 0.2
    nb_cap: int = 64
    proto_iters: int = 300
    stride: tuple = (8, 8, 8)
    augment: bool = True
    volumes: int = 20
    volume_shape: tuple = (32, 32, 32)
    labeled_count: int = 2
    unlabeled_count: int = 14
    test_count: int = 4
    ambiguity_min: float = 0.5
    ambiguity_max: float = 2.0


def validate_config(cfg):
    if cfg.iterations < 1 or cfg.lr_step < 1 or cfg.proto_iters < 0:
        raise ValueError("config: iteration counts must be positive")
    if cfg.S < 1 or cfg.r < 1:
        raise ValueError("config: S and r must be >= 1")
    for c in cfg.crop:
        if c < 8 or c % 2:
            raise ValueError(f"config: crop dims must be even and >= 8, got {cfg.crop}")
    for c, s in zip(cfg.crop, cfg.volume_shape):
        if c > s:
            raise ValueError("config: crop larger than volume")
    for st, c in zip(cfg.stride, cfg.crop):
        if st < 1 or st > c:
            raise ValueError("config: stride must be in [1, crop]")
    if cfg.labeled_count < 1:
        raise ValueError("config: need at least one labeled volume")
    if cfg.labeled_count + cfg.unlabeled_count + cfg.test_count != cfg.volumes:
        raise ValueError("config: split sizes must sum to the volume count")
    if cfg.ambiguity_min < 0 or cfg.ambiguity_max < cfg.ambiguity_min:
        raise ValueError("config: bad ambiguity range")
    if not 0 <= cfg.ema_decay < 1:
        raise ValueError("config: ema_decay outside [0, 1)")
    return cfg


_TUPLE_FIELDS = {"crop", "stride", "volume_shape"}
_BOOL_FIELDS = {"augment"}


def parse_config(path):
    """Flat key=value text, one field per line; '#' starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
            if key in _TUPLE_FIELDS:
                values[key] = tuple(int(x) for x in val.split(","))
            elif key in _BOOL_FIELDS:
                values[key] = val.lower() in ("1", "true", "yes")
            elif fields[key].type is int or isinstance(fields[key].default, int):
                values[key] = int(val)
            else:
                values[key] = float(val)
    return validate_config(TrainConfig(**values))


def write_config(path, cfg):
    with open(path, "w") as f:
        for fld in dataclasses.fields(TrainConfig):
            v = getattr(cfg, fld.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = int(v)
            f.write(f"{fld.name}={v}\n")


# -- rng streams -----------------------------------------------------------

_STREAMS = {
    "s1_init": 0, "s1_labeled": 1, "s1_unlabeled": 2, "s1_noise": 3,
    "s1_labeled_sample": 4, "s1_unlabeled_sample": 5, "s1_teacher_sample": 6,
    "s1_boundary": 7, "proto": 10, "s2_init": 20, "s2_labeled": 21,
    "s2_unlabeled": 22, "datagen": 100,
}


def stream(seed, name):
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAMS[name]]))


# -- shared helpers --------------------------------------------------------


def one_hot(label):
    flat = np.asarray(label).ravel()
    y = np.zeros((flat.size, NUM_CLASSES), dtype=np.float64)
    y[np.arange(flat.size), flat.astype(np.intp)] = 1.0
    return y


def _draw_crop(pool, rng, cfg):
    s = pool[int(rng.integers(0, len(pool)))]
    c = random_crop(s, cfg.crop, rng)
    if cfg.augment:
        c = random_rot90(random_flip(c, rng), rng)
    return c


def _mean_of(terms):
    if len(terms) == 1:
        return terms[0]
    return mul(tsum(stack(terms)), 1.0 / len(terms))


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """v <- momentum*v + (g + wd*theta); theta <- theta - lr*v. Non-mutating."""
    new_p, new_v = {}, {}
    for k, theta in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(theta)
        v = momentum * velocity[k] + (g + weight_decay * theta)
        new_v[k] = v
        new_p[k] = theta - lr * v
    return new_p, new_v


def learning_rate(cfg, t):
    return cfg.lr * cfg.lr_decay ** (t // cfg.lr_step)


def _logits_vc(out):
    """Mean-head logits of a single-volume batch as (V, C)."""
    _, C, H, W, D = out.mean.data.shape
    return transpose(reshape(out.mean, (C, H * W * D)))


def ce_and_dice_loss(logits, labels_1h):
    """Mean cross-entropy averaged with soft Dice loss; logits (V, C)."""
    V = logits.data.shape[0]
    y = Tensor(labels_1h)
    ce = mul(neg(tsum(mul(log_softmax(logits), y))), 1.0 / V)
    p = softmax(logits)
    num = mul(tsum(mul(p, y)), 2.0)
    den = add(tsum(p), float(labels_1h.sum()))
    dsc = sub(1.0, num / den)
    return mul(add(ce, dsc), 0.5)


# -- stage 1 ---------------------------------------------------------------


def train_stage1(cfg, dataset, log_cb=None):
    """Returns (student params, teacher params, list of per-iteration records)."""
    validate_config(cfg)
    if not dataset.labeled:
        raise ValueError("train_stage1: need at least one labeled sample")
    use_con = cfg.lambda_g_max > 0
    use_bcl = cfg.lambda_c > 0
    if use_con and not dataset.unlabeled:
        raise ValueError("train_stage1: consistency enabled but no unlabeled data")
    rngs = {k: stream(cfg.seed, k) for k in
            ("s1_init", "s1_labeled", "s1_unlabeled", "s1_noise",
             "s1_labeled_sample", "s1_unlabeled_sample", "s1_teacher_sample",
             "s1_boundary")}
    params = init_params(NUM_CLASSES, cfg.r, rngs["s1_init"])
    teacher = {k: v.copy() for k, v in params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    sched = RampSchedule(cfg.lambda_g_max, cfg.iterations)
    records = []
    t0 = time.time()
    for t in range(cfg.iterations):
        lr_t = learning_rate(cfg, t)
        tape = Tape()
        leaves = as_leaves(params, tape)
        sup_terms, bcl_terms = [], []
        for _ in range(cfg.labeled_batch):
            crop = _draw_crop(dataset.labeled, rngs["s1_labeled"], cfg)
            out = forward(leaves, Tensor(crop.volume[None, None]))
            dist = build_distribution(out)
            sup = supervised_loss_au(dist, one_hot(crop.label), cfg.S,
                                     rng=rngs["s1_labeled_sample"])
            sup_terms.append(mul(sup, 1.0 / dist.V))
            if use_bcl:
                shell = extract_boundary(crop.label)
                if len(shell):
                    px = sample_boundary_pixels(shell, crop.label, cfg.nb_cap,
                                                rngs["s1_boundary"])
                    if len(px) >= 2:
                        proj = reshape(out.proj, out.proj.data.shape[1:])
                        bcl = bcl_loss(proj, px, cfg.tau1)
                        bcl_terms.append(mul(bcl, 1.0 / len(px)))
        sup_mean = _mean_of(sup_terms)
        loss = sup_mean
        con_mean = None
        if use_con:
            t_leaves = as_leaves(teacher, None, requires_grad=False)
            con_terms = []
            for _ in range(cfg.unlabeled_batch):
                crop = _draw_crop(dataset.unlabeled, rngs["s1_unlabeled"], cfg)
                out_s = forward(leaves, Tensor(crop.volume[None, None]))
                smaps = sample_probability_maps(
                    build_distribution(out_s), cfg.S,
                    rng=rngs["s1_unlabeled_sample"])
                noisy = perturb_input(crop.volume, cfg.noise_std,
                                      cfg.noise_clip, rngs["s1_noise"])
                out_t = forward(t_leaves, Tensor(noisy[None, None]))
                tmaps = sample_probability_maps(
                    build_distribution(out_t), cfg.S,
                    rng=rngs["s1_teacher_sample"])
                ged = ged_consistency(smaps, tmaps)
                con_terms.append(mul(ged, 1.0 / (cfg.S * cfg.S)))
            con_mean = _mean_of(con_terms)
            loss = aua_loss(loss, con_mean, t, sched)
        bcl_mean = _mean_of(bcl_terms) if bcl_terms else None
        if bcl_mean is not None:
            loss = add(loss, mul(bcl_mean, cfg.lambda_c))
        tape.backward(loss)
        grads = {k: lv.grad for k, lv in leaves.items()}
        params, velocity = sgd_step(params, grads, velocity, lr_t,
                                    cfg.momentum, cfg.weight_decay)
        ema_update(teacher, params, cfg.ema_decay)
        rec = {
            "stage": 1, "iteration": t, "lr": lr_t,
            "lambda_g": ramp_weight(t, sched) if use_con else 0.0,
            "loss": loss.item(), "sup_au": sup_mean.item(),
            "con": con_mean.item() if con_mean is not None else None,
            "bcl": bcl_mean.item() if bcl_mean is not None else None,
            "wall_time": time.time() - t0,
        }
        records.append(rec)
        if log_cb:
            log_cb(rec)
    return params, teacher, records


# -- sliding-window inference ---------------------------------------------


def _axis_origins(dim, crop, stride):
    xs = list(range(0, dim - crop + 1, stride))
    if xs[-1] != dim - crop:
        xs.append(dim - crop)  # clamp the last window to the volume edge
    return xs


def sliding_window_logits(params, volume, crop, stride):
    """Per-voxel average of mean-head logits over all covering windows."""
    H, W, D = volume.shape
    ch, cw, cd = crop
    leaves = as_leaves(params, None, requires_grad=False)
    sums = np.zeros((NUM_CLASSES, H, W, D))
    counts = np.zeros((H, W, D))
    for ox in _axis_origins(H, ch, stride[0]):
        for oy in _axis_origins(W, cw, stride[1]):
            for oz in _axis_origins(D, cd, stride[2]):
                sl = (slice(ox, ox + ch), slice(oy, oy + cw), slice(oz, oz + cd))
                win = np.ascontiguousarray(volume[sl])
                out = forward(leaves, Tensor(win[None, None]))
                sums[(slice(None),) + sl] += out.mean.data[0]
                counts[sl] += 1.0
    return sums / counts


def predict_labels(params, volume, crop, stride):
    """Fused argmax segmentation; ties resolve to class 0."""
    logits = sliding_window_logits(params, volume, crop, stride)
    return np.argmax(logits, axis=0).astype(np.uint8)


def generate_pseudo_labels(params, samples, crop, stride):
    """Attach argmax pseudo-labels; samples stay is_labeled=False."""
    out = []
    for s in samples:
        lab = predict_labels(params, s.volume, crop, stride)
        out.append(VolumeSample(id=s.id, volume=s.volume, label=lab,
                                is_labeled=False, ambiguity=s.ambiguity))
    return out


# -- prototypes ------------------------------------------------------------


def estimate_prototypes(params, samples, cfg, rng=None):
    """Accumulate per-class projection statistics over random crops of the
    (true + pseudo) labeled samples, then freeze."""
    for s in samples:
        if s.label is None:
            raise ValueError(f"estimate_prototypes: sample {s.id} has no label")
    if rng is None:
        rng = stream(cfg.seed, "proto")
    leaves = as_leaves(params, None, requires_grad=False)
    protos = new_prototypes(NUM_CLASSES)
    for _ in range(cfg.proto_iters):
        s = samples[int(rng.integers(0, len(samples)))]
        c = random_crop(s, cfg.crop, rng)
        out = forward(leaves, Tensor(c.volume[None, None]))
        V = c.volume.size
        feats = out.proj.data[0].reshape(out.proj.data.shape[1], V)
        update_prototypes(protos, feats, c.label.ravel())
    return freeze_prototypes(protos)


# -- stage 2 ---------------------------------------------------------------


def train_stage2(cfg, labeled, pseudo_labeled, protos, log_cb=None):
    """Fresh network trained on true + pseudo labels; returns (params, records)."""
    validate_config(cfg)
    if not labeled or not pseudo_labeled:
        raise ValueError("train_stage2: need labeled and pseudo-labeled samples")
    for s in pseudo_labeled:
        if s.label is None:
            raise ValueError(f"train_stage2: sample {s.id} lacks a pseudo-label")
    use_pcl = cfg.lambda_r > 0
    if use_pcl:
        if len(protos) != NUM_CLASSES or not all(p.frozen for p in protos):
            raise ValueError("train_stage2: prototypes must be frozen")
        if any(p.count == 0 for p in protos):
            raise ValueError("train_stage2: prototype with zero observations")
    rngs = {k: stream(cfg.seed, k) for k in ("s2_init", "s2_labeled", "s2_unlabeled")}
    params = init_params(NUM_CLASSES, cfg.r, rngs["s2_init"])
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    records = []
    t0 = time.time()
    for t in range(cfg.iterations):
        lr_t = learning_rate(cfg, t)
        tape = Tape()
        leaves = as_leaves(params, tape)
        sup_terms, pcl_terms = [], []
        crops = (
            [_draw_crop(labeled, rngs["s2_labeled"], cfg)
             for _ in range(cfg.labeled_batch)]
            + [_draw_crop(pseudo_labeled, rngs["s2_unlabeled"], cfg)
               for _ in range(cfg.unlabeled_batch)]
        )
        for crop in crops:
            out = forward(leaves, Tensor(crop.volume[None, None]))
            y = one_hot(crop.label)
            sup_terms.append(ce_and_dice_loss(_logits_vc(out), y))
            if use_pcl:
                V = crop.volume.size
                proj = reshape(out.proj, (out.proj.data.shape[1], V))
                pcl_terms.append(pcl_loss(proj, crop.label.ravel(), protos,
                                          cfg.tau2))
        sup_mean = _mean_of(sup_terms)
        loss = sup_mean
        pcl_mean = _mean_of(pcl_terms) if pcl_terms else None
        if pcl_mean is not None:
            loss = add(loss, mul(pcl_mean, cfg.lambda_r))
        tape.backward(loss)
        grads = {k: lv.grad for k, lv in leaves.items()}
        params, velocity = sgd_step(params, grads, velocity, lr_t,
                                    cfg.momentum, cfg.weight_decay)
        rec = {
            "stage": 2, "iteration": t, "lr": lr_t,
            "loss": loss.item(), "sup_ced": sup_mean.item(),
            "pcl": pcl_mean.item() if pcl_mean is not None else None,
            "wall_time": time.time() - t0,
        }
        records.append(rec)
        if log_cb:
            log_cb(rec)
    return params, records


# -- evaluation ------------------------------------------------------------


def evaluate(params, test_samples, cfg, spacing=(1.0, 1.0, 1.0)):
    """Per-case and summary metrics of fused predictions on labeled test data."""
    if not test_samples:
        raise ValueError("evaluate: empty test set")
    cases = []
    for s in test_samples:
        if s.label is None:
            raise ValueError(f"evaluate: test sample {s.id} has no label")
        pred = predict_labels(params, s.volume, cfg.crop, cfg.stride)
        case = {"id": s.id,
                "dice": dice(pred, s.label),
                "jaccard": jaccard(pred, s.label)}
        try:
            asd, hd95 = surface_distances(pred, s.label, spacing)
            case["asd"], case["hd95"] = asd, hd95
        except SurfaceUndefinedError:
            case["asd"] = case["hd95"] = None
        cases.append(case)
    summary = {}
    for key in ("dice", "jaccard", "asd", "hd95"):
        vals = [c[key] for c in cases if c[key] is not None]
        summary[f"{key}_mean"] = float(np.mean(vals)) if vals else None
        summary[f"{key}_std"] = float(np.std(vals)) if vals else None
    summary["failed_surface"] = sum(1 for c in cases if c["asd"] is None)
    return {"cases": cases, "summary": summary}


def metrics_json(result):
    return json.dumps(result, sort_keys=True, indent=2) + "\n"


# -- dataset generation and the ablation ladder ---------------------------


def gen_dataset(cfg, rng=None):
    """Synthesize the configured dataset; unlabeled samples get their labels
    stripped so training can only reach them through pseudo-labeling."""
    validate_config(cfg)
    if rng is None:
        rng = stream(cfg.seed, "datagen")
    seeds = rng.integers(0, 2 ** 63 - 1, size=cfg.volumes)
    ds = Dataset(labeled=[], unlabeled=[], test=[])
    rng_amb = (cfg.ambiguity_min, cfg.ambiguity_max)
    for i in range(cfg.volumes):
        child = np.random.default_rng(int(seeds[i]))
        s = generate_sample(f"sample_{i:03d}", cfg.volume_shape, rng_amb, child)
        if i < cfg.labeled_count:
            ds.labeled.append(s)
        elif i < cfg.labeled_count + cfg.unlabeled_count:
            ds.unlabeled.append(VolumeSample(
                id=s.id, volume=s.volume, label=None, is_labeled=False,
                ambiguity=s.ambiguity))
        else:
            ds.test.append(s)
    return ds


def run_ladder(cfg, seeds):
    """Mean test Dice per method rung, per seed. Rungs, in order:
    supervised baseline, +consistency, +boundary contrast, +pseudo-label
    retraining, +prototype contrast."""
    rungs = {k: [] for k in ("baseline", "consistency", "boundary",
                             "pseudo", "full")}
    for seed in seeds:
        base_cfg = dataclasses.replace(cfg, seed=seed)
        ds = gen_dataset(base_cfg)

        def test_dice(params):
            res = evaluate(params, ds.test, base_cfg)
            return res["summary"]["dice_mean"]

        sup_cfg = dataclasses.replace(base_cfg, lambda_g_max=0.0, lambda_c=0.0)
        p_sup, _, _ = train_stage1(sup_cfg, ds)
        rungs["baseline"].append(test_dice(p_sup))

        aua_cfg = dataclasses.replace(base_cfg, lambda_c=0.0)
        p_aua, _, _ = train_stage1(aua_cfg, ds)
        rungs["consistency"].append(test_dice(p_aua))

        p_s1, _, _ = train_stage1(base_cfg, ds)
        rungs["boundary"].append(test_dice(p_s1))

        pseudo = generate_pseudo_labels(p_s1, ds.unlabeled, base_cfg.crop,
                                        base_cfg.stride)
        nopcl_cfg = dataclasses.replace(base_cfg, lambda_r=0.0)
        p_s2a, _ = train_stage2(nopcl_cfg, ds.labeled, pseudo, protos=None)
        rungs["pseudo"].append(test_dice(p_s2a))

        protos = estimate_prototypes(p_s1, ds.labeled + pseudo, base_cfg)
        p_s2b, _ = train_stage2(base_cfg, ds.labeled, pseudo, protos)
        rungs["full"].append(test_dice(p_s2b))
    means = {k: float(np.mean(v)) for k, v in rungs.items()}
    return {"per_seed": rungs, "means": means}
