"""Tiny 3D encoder-decoder with four output heads.

Layout (all convs cubic, ReLU after every conv except the four head outputs
and the last projection conv):

    enc1: conv 1->8,  k3, pad 1
    down: conv 8->16, k3, stride 2, pad 1
    enc2: conv 16->16, k3, pad 1
    up:   transposed conv 16->8, k2, stride 2
    dec:  conv 16->8, k3, pad 1   (input = concat[up, enc1] along channels)

    heads on dec output:
      mean:   conv 8->C,   k1   (logit means)
      factor: conv 8->C*r, k1   (low-rank covariance factor, raw)
      diag:   conv 8->C,   k1   (covariance diagonal, raw)
      proj:   conv 8->16 k1 + ReLU, conv 16->16 k1 + ReLU, conv 16->16 k1,
              then per-voxel unit normalization (norm floored at 1e-8)

Parameters live in a plain dict name -> float64 ndarray. Weights are drawn
N(0, 2/fan_in), biases start at zero, in a fixed declaration order so a seed
pins every value.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat, conv3d, conv_transpose3d, relu, unit_normalize

PROJ_DIM = 16

# (name, kind, shape-builder) in canonical init order
def _layer_specs(C, r):
    return [
        ("enc1", "conv", (8, 1, 3, 3, 3)),
        ("down", "conv", (16, 8, 3, 3, 3)),
        ("enc2", "conv", (16, 16, 3, 3, 3)),
        ("up", "tconv", (16, 8, 2, 2, 2)),
        ("dec", "conv", (8, 16, 3, 3, 3)),
        ("mean", "conv", (C, 8, 1, 1, 1)),
        ("factor", "conv", (C * r, 8, 1, 1, 1)),
        ("diag", "conv", (C, 8, 1, 1, 1)),
        ("proj1", "conv", (PROJ_DIM, 8, 1, 1, 1)),
        ("proj2", "conv", (PROJ_DIM, PROJ_DIM, 1, 1, 1)),
        ("proj3", "conv", (PROJ_DIM, PROJ_DIM, 1, 1, 1)),
    ]


def init_params(C, r, rng):
    """Fresh parameter dict; draw order is the declaration order above."""
    params = {}
    for name, kind, shape in _layer_specs(C, r):
        if kind == "conv":
            cout, cin = shape[0], shape[1]
        else:  # transposed conv stores (Cin, Cout, k, k, k)
            cin, cout = shape[0], shape[1]
        fan_in = cin * shape[2] * shape[3] * shape[4]
        std = np.sqrt(2.0 / fan_in)
        params[name + ".w"] = rng.standard_normal(shape) * std
        params[name + ".b"] = np.zeros(cout, dtype=np.float64)
    return params


def zero_params(C, r):
    rngless = {}
    for name, kind, shape in _layer_specs(C, r):
        cout = shape[0] if kind == "conv" else shape[1]
        rngless[name + ".w"] = np.zeros(shape, dtype=np.float64)
        rngless[name + ".b"] = np.zeros(cout, dtype=np.float64)
    return rngless


def num_classes(params):
    return params["mean.w"].shape[0]


def factor_rank(params):
    return params["factor.w"].shape[0] // num_classes(params)


def as_leaves(params, tape=None, requires_grad=True):
    """Wrap the parameter arrays as tensors, optionally as gradient leaves."""
    if requires_grad and tape is None:
        raise ValueError("gradient leaves need a tape")
    return {k: Tensor(v, requires_grad=requires_grad, tape=tape)
            for k, v in params.items()}


@dataclass
class NetworkOutput:
    mean: Tensor      # [N, C, H, W, D]
    factor: Tensor    # [N, C*r, H, W, D]
    diag_raw: Tensor  # [N, C, H, W, D]
    proj: Tensor      # [N, 16, H, W, D], per-voxel unit length


def forward(leaves, volume):
    """Run the network. `leaves` comes from as_leaves; `volume` is a Tensor
    [N,1,H,W,D] with even spatial dims >= 8."""
    if volume.data.ndim != 5 or volume.data.shape[1] != 1:
        raise ValueError("forward: volume must be [N,1,H,W,D]")
    _, _, H, W, D = volume.data.shape
    for d in (H, W, D):
        if d < 8 or d % 2 != 0:
            raise ValueError(f"forward: spatial dims must be even and >= 8, got {(H, W, D)}")
    p = leaves
    e1 = relu(conv3d(volume, p["enc1.w"], p["enc1.b"], stride=1, padding=1))
    d1 = relu(conv3d(e1, p["down.w"], p["down.b"], stride=2, padding=1))
    e2 = relu(conv3d(d1, p["enc2.w"], p["enc2.b"], stride=1, padding=1))
    u1 = relu(conv_transpose3d(e2, p["up.w"], p["up.b"], stride=2))
    cat = concat([u1, e1], axis=1)
    dc = relu(conv3d(cat, p["dec.w"], p["dec.b"], stride=1, padding=1))
    mean = conv3d(dc, p["mean.w"], p["mean.b"])
    factor = conv3d(dc, p["factor.w"], p["factor.b"])
    diag_raw = conv3d(dc, p["diag.w"], p["diag.b"])
    h = relu(conv3d(dc, p["proj1.w"], p["proj1.b"]))
    h = relu(conv3d(h, p["proj2.w"], p["proj2.b"]))
    proj = unit_normalize(conv3d(h, p["proj3.w"], p["proj3.b"]), eps=1e-8)
    return NetworkOutput(mean=mean, factor=factor, diag_raw=diag_raw, proj=proj)


# -- checkpoint file format ------------------------------------------------
#
# magic "AUAP" | u32 version | then for each parameter in sorted-name order:
#   u16 name length | name utf-8 | u8 rank | u32 x rank dims | f64 values
# all integers and floats little-endian, values row-major.

CHECKPOINT_MAGIC = b"AUAP"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def save_checkpoint(path, params):
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    params = {}
    while pos < len(blob):
        try:
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            end = pos + 8 * count
            if end > len(blob):
                raise struct.error("value block past end of file")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos = end
        except (struct.error, UnicodeDecodeError) as e:
            raise FormatError(f"{path}: truncated or corrupt checkpoint ({e})")
        params[name] = arr.reshape(shape).astype(np.float64)
    return params
