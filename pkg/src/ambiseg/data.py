"""Synthetic ambiguous-boundary volumes, augmentations, and the .ssv format.

Each sample is a float64 intensity volume plus a crisp binary label. A sample
starts as a union of one to three random axis-aligned ellipsoids (foreground
intensity 1, background 0); the intensity volume is then Gaussian-blurred
with a per-sample width drawn from the ambiguity range (the knob that makes
object boundaries genuinely uncertain), dosed with additive Gaussian pixel
noise, and normalized to zero mean / unit variance. The label keeps the
pre-blur crisp mask, so the blur width controls how unfaithful the visible
boundary is to the label.
"""

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .network import FormatError

PIXEL_NOISE_STD = 0.05

# ellipsoid semi-axes and centers, as fractions of each volume dimension;
# chosen so any single blob keeps foreground fraction above 0.02 and three
# maximal blobs stay under 0.40
_SEMI_LO, _SEMI_HI = 0.18, 0.28
_CENTER_LO, _CENTER_HI = 0.32, 0.68


@dataclass
class VolumeSample:
    id: str
    volume: np.ndarray            # float64 (H, W, D)
    label: Optional[np.ndarray]   # uint8 (H, W, D) or None
    is_labeled: bool
    ambiguity: float = 0.0

    def __post_init__(self):
        if self.volume.ndim != 3:
            raise ValueError("VolumeSample: volume must be 3-D")
        if self.is_labeled and self.label is None:
            raise ValueError("VolumeSample: labeled sample without a label")
        if self.label is not None and self.label.shape != self.volume.shape:
            raise ValueError("VolumeSample: label/volume shape mismatch")


def _ellipsoid_mask(shape, center, semi):
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, a in zip(grids, center, semi):
        acc = acc + ((g - c) / a) ** 2
    return acc <= 1.0


def generate_sample(sample_id, shape, ambiguity_range, rng, noise_std=PIXEL_NOISE_STD):
    """One synthetic sample; all randomness comes from `rng`."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 8 for s in shape):
        raise ValueError("generate_sample: shape must be 3-D with dims >= 8")
    lo, hi = ambiguity_range
    if lo < 0 or hi < lo:
        raise ValueError("generate_sample: bad ambiguity range")
    mask = np.zeros(shape, dtype=bool)
    n_blobs = int(rng.integers(1, 4))
    for _ in range(n_blobs):
        center = [rng.uniform(_CENTER_LO * s, _CENTER_HI * s) for s in shape]
        semi = [rng.uniform(_SEMI_LO * s, _SEMI_HI * s) for s in shape]
        mask |= _ellipsoid_mask(shape, center, semi)
    ambiguity = float(rng.uniform(lo, hi))
    vol = mask.astype(np.float64)
    if ambiguity > 0:
        vol = ndimage.gaussian_filter(vol, sigma=ambiguity)
    if noise_std > 0:
        vol = vol + rng.standard_normal(shape) * noise_std
    vol = vol - vol.mean()
    sd = vol.std()
    if sd > 0:
        vol = vol / sd
    return VolumeSample(id=sample_id, volume=vol,
                        label=mask.astype(np.uint8), is_labeled=True,
                        ambiguity=ambiguity)


def generate_synthetic(count, shape, ambiguity_range, rng, noise_std=PIXEL_NOISE_STD):
    """List of `count` samples; each sample gets its own child generator so
    generation order equals a per-sample derived-seed scheme."""
    seeds = rng.integers(0, 2 ** 63 - 1, size=count)
    out = []
    for i in range(count):
        child = np.random.default_rng(int(seeds[i]))
        out.append(generate_sample(f"sample_{i:03d}", shape, ambiguity_range,
                                   child, noise_std=noise_std))
    return out


# -- augmentations ---------------------------------------------------------


def random_crop(sample, crop_shape, rng):
    crop_shape = tuple(int(c) for c in crop_shape)
    for c, s in zip(crop_shape, sample.volume.shape):
        if c < 1 or c > s:
            raise ValueError(f"random_crop: crop {crop_shape} does not fit "
                             f"{sample.volume.shape}")
    origin = [int(rng.integers(0, s - c + 1))
              for c, s in zip(crop_shape, sample.volume.shape)]
    sl = tuple(slice(o, o + c) for o, c in zip(origin, crop_shape))
    label = sample.label[sl].copy() if sample.label is not None else None
    return VolumeSample(id=sample.id, volume=sample.volume[sl].copy(),
                        label=label, is_labeled=sample.is_labeled,
                        ambiguity=sample.ambiguity)


def random_flip(sample, rng):
    """Flip each axis independently with probability 1/2."""
    axes = [ax for ax in range(3) if rng.integers(0, 2)]
    vol, lab = sample.volume, sample.label
    if axes:
        vol = np.ascontiguousarray(np.flip(vol, axis=axes))
        if lab is not None:
            lab = np.ascontiguousarray(np.flip(lab, axis=axes))
    return VolumeSample(id=sample.id, volume=vol, label=lab,
                        is_labeled=sample.is_labeled, ambiguity=sample.ambiguity)


def random_rot90(sample, rng):
    """Rotate by a random multiple of 90 degrees in a random axis pair."""
    pairs = [(0, 1), (0, 2), (1, 2)]
    axes = pairs[int(rng.integers(0, 3))]
    k = int(rng.integers(0, 4))
    vol, lab = sample.volume, sample.label
    if k:
        vol = np.ascontiguousarray(np.rot90(vol, k=k, axes=axes))
        if lab is not None:
            lab = np.ascontiguousarray(np.rot90(lab, k=k, axes=axes))
    return VolumeSample(id=sample.id, volume=vol, label=lab,
                        is_labeled=sample.is_labeled, ambiguity=sample.ambiguity)


# -- .ssv volume format ----------------------------------------------------
#
# magic "SSV1" | u32 H | u32 W | u32 D | u8 has_label | u8 is_labeled |
# f64 voxels row-major (H outer, D inner) | u8 labels (if has_label)
# all little-endian.

VOLUME_MAGIC = b"SSV1"
_DIM_CAP = 2 ** 31


def write_volume(path, sample):
    H, W, D = sample.volume.shape
    if max(H, W, D) >= _DIM_CAP:
        raise FormatError(f"write_volume: dimension overflow {sample.volume.shape}")
    has_label = sample.label is not None
    blob = bytearray()
    blob += VOLUME_MAGIC
    blob += struct.pack("<III", H, W, D)
    blob += struct.pack("<BB", int(has_label), int(sample.is_labeled))
    blob += np.ascontiguousarray(sample.volume, dtype="<f8").tobytes()
    if has_label:
        if not np.isin(sample.label, (0, 1)).all():
            raise ValueError("write_volume: label must be binary")
        blob += np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def read_volume(path, sample_id=None):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad volume magic {blob[:4]!r}")
    if len(blob) < 18:
        raise FormatError(f"{path}: truncated header")
    H, W, D = struct.unpack_from("<III", blob, 4)
    has_label, is_labeled = struct.unpack_from("<BB", blob, 16)
    if min(H, W, D) < 1 or max(H, W, D) >= _DIM_CAP:
        raise FormatError(f"{path}: dimension overflow {(H, W, D)}")
    n = H * W * D
    expected = 18 + 8 * n + (n if has_label else 0)
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    vol = np.frombuffer(blob, dtype="<f8", count=n, offset=18)
    vol = vol.astype(np.float64).reshape(H, W, D)
    label = None
    if has_label:
        label = np.frombuffer(blob, dtype=np.uint8, count=n, offset=18 + 8 * n)
        label = label.copy().reshape(H, W, D)
    if sample_id is None:
        import os
        sample_id = os.path.splitext(os.path.basename(path))[0]
    return VolumeSample(id=sample_id, volume=vol, label=label,
                        is_labeled=bool(is_labeled))


# -- dataset manifest ------------------------------------------------------

SPLITS = ("labeled", "unlabeled", "test")


def write_manifest(path, rows):
    """rows: list of (id, relative path, split)."""
    with open(path, "w") as f:
        for sid, rel, split in rows:
            if split not in SPLITS:
                raise ValueError(f"write_manifest: unknown split {split!r}")
            f.write(f"{sid}\t{rel}\t{split}\n")


def read_manifest(path):
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in SPLITS:
                raise FormatError(f"{path}:{ln}: bad manifest line {line!r}")
            rows.append(tuple(parts))
    return rows


@dataclass
class Dataset:
    labeled: list
    unlabeled: list
    test: list


def load_dataset(manifest_path):
    import os
    base = os.path.dirname(os.path.abspath(manifest_path))
    ds = Dataset(labeled=[], unlabeled=[], test=[])
    for sid, rel, split in read_manifest(manifest_path):
        sample = read_volume(os.path.join(base, rel), sample_id=sid)
        getattr(ds, split).append(sample)
    return ds
