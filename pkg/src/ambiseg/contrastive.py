"""Stage-adaptive contrastive losses and streaming class prototypes.

Stage 1 (boundary): sample up to a cap of voxels from the outer boundary
shell of a binary mask (26-neighborhood dilation minus the mask) and apply an
InfoNCE-style loss over their unit projection features: for each sampled
pixel i, positives are the other sampled pixels with the same class label,
the denominator runs over every other sampled pixel.

Stage 2 (prototype): per-class feature statistics (mean + population
covariance, merged batch-by-batch with the parallel moment-merge rule) act
as fixed anchors; each voxel is scored against its own class prototype and
the rival one through a second-order term.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import (Tensor, add, logsumexp, matmul, mul, reshape, softplus,
                     stack, sub, take, transpose, tsum)

FEATURE_DIM = 16


# -- boundary extraction and sampling --------------------------------------

_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


def extract_boundary(mask):
    """Flat row-major indices of the outer boundary shell of a binary mask.

    The shell is (dilate(mask, 26-neighborhood) minus mask): background
    voxels touching the foreground, so the result is disjoint from the mask.
    Returned sorted ascending.
    """
    m = np.asarray(mask)
    if m.ndim != 3:
        raise ValueError("extract_boundary: mask must be 3-D")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("extract_boundary: mask must be binary")
    m = m.astype(bool)
    if not m.any():
        return np.empty(0, dtype=np.intp)
    shell = ndimage.binary_dilation(m, structure=_STRUCT_26) & ~m
    return np.flatnonzero(shell)


@dataclass
class BoundaryPixels:
    indices: np.ndarray  # flat voxel indices, shape (n,)
    labels: np.ndarray   # class id per index, shape (n,)

    def __len__(self):
        return len(self.indices)


def sample_boundary_pixels(boundary, labels, cap, rng):
    """Uniformly sample min(cap, |boundary|) indices without replacement,
    tagging each with its class in the label volume."""
    if cap < 1:
        raise ValueError("sample_boundary_pixels: cap must be >= 1")
    boundary = np.asarray(boundary, dtype=np.intp)
    lab = np.asarray(labels)
    if lab.ndim != 3:
        raise ValueError("sample_boundary_pixels: labels must be a 3-D volume")
    if len(boundary) == 0:
        return BoundaryPixels(np.empty(0, dtype=np.intp), np.empty(0, dtype=np.int64))
    n = min(cap, len(boundary))
    chosen = np.sort(rng.choice(len(boundary), size=n, replace=False))
    idx = boundary[chosen]
    return BoundaryPixels(idx, lab.ravel()[idx].astype(np.int64))


def gather_features(proj, flat_indices):
    """Rows of sampled voxel features: proj [F,H,W,D] -> Tensor (n, F)."""
    F = proj.data.shape[0]
    V = proj.data[0].size
    idx = np.asarray(flat_indices, dtype=np.intp)
    grid = (np.arange(F, dtype=np.intp)[:, None] * V + idx[None, :]).ravel()
    feats = reshape(take(proj, grid), (F, len(idx)))
    return transpose(feats)


def bcl_loss(proj, pixels, tau1=0.07):
    """Boundary InfoNCE over sampled pixels of one volume.

    proj: Tensor [16,H,W,D] of unit voxel features. pixels: BoundaryPixels.
    Pixels with no same-class partner contribute zero; at least two sampled
    pixels are required.
    """
    n = len(pixels)
    if n < 2:
        raise ValueError("bcl_loss: need at least two sampled pixels")
    if proj.data.ndim != 4:
        raise ValueError("bcl_loss: proj must be [F,H,W,D]")
    feats = gather_features(proj, pixels.indices)          # (n, F)
    logits = mul(matmul(feats, transpose(feats)), 1.0 / tau1)  # (n, n)
    labs = pixels.labels
    terms = []
    for i in range(n):
        same = np.flatnonzero(labs == labs[i])
        pos = same[same != i]
        if len(pos) == 0:
            continue
        others = np.concatenate([np.arange(i), np.arange(i + 1, n)])
        row_o = take(logits, i * n + others)
        lse = logsumexp(row_o)
        pos_sum = tsum(take(logits, i * n + pos))
        # -(1/|P|) sum_p (logit_ip - lse) = lse - pos_sum/|P|
        terms.append(sub(lse, mul(pos_sum, 1.0 / len(pos))))
    if not terms:
        return Tensor(0.0)
    return tsum(stack(terms))


# -- class prototypes ------------------------------------------------------


@dataclass
class ClassPrototype:
    class_id: int
    count: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    cov: np.ndarray = field(
        default_factory=lambda: np.zeros((FEATURE_DIM, FEATURE_DIM)))
    frozen: bool = False


def new_prototypes(num_classes=2):
    return [ClassPrototype(class_id=c) for c in range(num_classes)]


def _merge_moments(N, mu, cov, n, mu_b, cov_b):
    """Parallel merge of two (count, mean, population covariance) summaries."""
    tot = N + n
    delta = mu - mu_b
    mean = (N * mu + n * mu_b) / tot
    cov = (N * cov + n * cov_b) / tot + (N * n) * np.outer(delta, delta) / (tot * tot)
    return tot, mean, cov


def update_prototypes(protos, feats, labels):
    """Fold one batch of per-voxel features into the running prototypes.

    feats: Tensor or array [16, V]; labels: int array (V,). Classes absent
    from the batch are untouched. Errors on frozen prototypes.
    """
    f = feats.data if isinstance(feats, Tensor) else np.asarray(feats, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != FEATURE_DIM:
        raise ValueError(f"update_prototypes: feats must be [{FEATURE_DIM}, V]")
    lab = np.asarray(labels).ravel()
    if lab.shape[0] != f.shape[1]:
        raise ValueError("update_prototypes: label count != voxel count")
    for p in protos:
        if p.frozen:
            raise ValueError(f"update_prototypes: prototype {p.class_id} is frozen")
    for p in protos:
        sel = lab == p.class_id
        nb = int(sel.sum())
        if nb == 0:
            continue
        X = f[:, sel]
        mu_b = X.mean(axis=1)
        Xc = X - mu_b[:, None]
        cov_b = (Xc @ Xc.T) / nb
        p.count, p.mean, p.cov = _merge_moments(
            p.count, p.mean, p.cov, nb, mu_b, cov_b)
    return protos


def freeze_prototypes(protos):
    for p in protos:
        p.frozen = True
    return protos


def pcl_loss(proj, labels, protos, tau2=100.0):
    """Prototype contrastive loss, averaged over voxels.

    proj: Tensor [16, V]; labels: int array (V,) of class ids; protos: two
    frozen ClassPrototypes with nonzero counts. Per voxel with own class p
    and rival n:

        q_c   = f^T cov_c f
        a_c   = f.mean_c / tau2 + q_c / (2 tau2^2)
        loss  = q_p - log( e^{a_p} / (e^{a_p} + e^{a_n}) )
              = q_p + softplus(a_n - a_p)

    Gradients flow into proj only; prototypes are constants.
    """
    if len(protos) != 2:
        raise ValueError("pcl_loss: exactly two class prototypes required")
    for p in protos:
        if not p.frozen:
            raise ValueError(f"pcl_loss: prototype {p.class_id} not frozen")
        if p.count == 0:
            raise ValueError(f"pcl_loss: prototype {p.class_id} has no observations")
    if proj.data.ndim != 2 or proj.data.shape[0] != FEATURE_DIM:
        raise ValueError(f"pcl_loss: proj must be [{FEATURE_DIM}, V]")
    V = proj.data.shape[1]
    lab = np.asarray(labels).ravel()
    if lab.shape[0] != V:
        raise ValueError("pcl_loss: label count != voxel count")
    if not np.isin(lab, (0, 1)).all():
        raise ValueError("pcl_loss: labels must be binary class ids")
    by_class = sorted(protos, key=lambda p: p.class_id)
    if [p.class_id for p in by_class] != [0, 1]:
        raise ValueError("pcl_loss: prototypes must cover classes 0 and 1")

    F = transpose(proj)                                    # (V, 16)
    qa = []
    for p in by_class:
        sig = Tensor(p.cov)
        mu_col = Tensor(p.mean.reshape(FEATURE_DIM, 1))
        q = tsum(mul(matmul(F, sig), F), axis=(1,))        # (V,) f^T sig f
        m = reshape(matmul(F, mu_col), (V,))               # (V,) f . mu
        a = add(mul(m, 1.0 / tau2), mul(q, 1.0 / (2.0 * tau2 * tau2)))
        qa.append((q, a))
    mask1 = (lab == 1).astype(np.float64)
    own = Tensor(1.0 - mask1), Tensor(mask1)
    q_own = add(mul(qa[0][0], own[0]), mul(qa[1][0], own[1]))
    a_own = add(mul(qa[0][1], own[0]), mul(qa[1][1], own[1]))
    a_rival = add(mul(qa[0][1], own[1]), mul(qa[1][1], own[0]))
    per_voxel = add(q_own, softplus(sub(a_rival, a_own)))
    return mul(tsum(per_voxel), 1.0 / V)


# -- prototype file format -------------------------------------------------
#
# magic "AUAC" | per class: u32 class id | u64 count | 16 f64 means |
# 256 f64 covariance entries (row-major); everything little-endian.

PROTO_MAGIC = b"AUAC"


def save_prototypes(path, protos):
    blob = bytearray()
    blob += PROTO_MAGIC
    for p in sorted(protos, key=lambda p: p.class_id):
        blob += struct.pack("<I", p.class_id)
        blob += struct.pack("<Q", p.count)
        blob += np.ascontiguousarray(p.mean, dtype="<f8").tobytes()
        blob += np.ascontiguousarray(p.cov, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_prototypes(path):
    from .network import FormatError
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != PROTO_MAGIC:
        raise FormatError(f"{path}: bad prototype magic {blob[:4]!r}")
    rec = 4 + 8 + 8 * FEATURE_DIM + 8 * FEATURE_DIM * FEATURE_DIM
    body = blob[4:]
    if len(body) % rec != 0:
        raise FormatError(f"{path}: truncated prototype file")
    protos = []
    for off in range(0, len(body), rec):
        (cid,) = struct.unpack_from("<I", body, off)
        (count,) = struct.unpack_from("<Q", body, off + 4)
        mean = np.frombuffer(body, dtype="<f8", count=FEATURE_DIM, offset=off + 12)
        cov = np.frombuffer(body, dtype="<f8", count=FEATURE_DIM * FEATURE_DIM,
                            offset=off + 12 + 8 * FEATURE_DIM)
        protos.append(ClassPrototype(
            class_id=cid, count=count,
            mean=mean.astype(np.float64),
            cov=cov.astype(np.float64).reshape(FEATURE_DIM, FEATURE_DIM),
            frozen=True))
    return protos
