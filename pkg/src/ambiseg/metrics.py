"""Overlap and surface-distance metrics for binary 3D masks.

Surfaces are the mask voxels with at least one face-adjacent (6-neighborhood)
background voxel, where everything outside the volume counts as background.
Distances are Euclidean voxel-center distances with optional anisotropic
spacing; both directed distance sets (prediction surface to truth surface and
back) are pooled before taking the mean (ASD) and the 95th-percentile
nearest-rank order statistic (HD95).
"""

import math

import numpy as np
from scipy import ndimage


class SurfaceUndefinedError(ValueError):
    """Raised when a mask is empty and thus has no surface."""


_FACE_STRUCT = ndimage.generate_binary_structure(3, 1)  # 6-neighborhood


def _as_binary(mask, name):
    m = np.asarray(mask)
    if m.ndim != 3:
        raise ValueError(f"{name} must be a 3-D volume")
    if not np.isin(m, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return m.astype(bool)


def dice(pred, truth):
    """2|P inter G| / (|P| + |G|); two empty masks count as perfect (1.0)."""
    p = _as_binary(pred, "pred")
    g = _as_binary(truth, "truth")
    if p.shape != g.shape:
        raise ValueError("dice: shape mismatch")
    ps, gs = int(p.sum()), int(g.sum())
    if ps + gs == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / (ps + gs)


def jaccard(pred, truth):
    """|P inter G| / |P union G|; two empty masks count as perfect (1.0)."""
    p = _as_binary(pred, "pred")
    g = _as_binary(truth, "truth")
    if p.shape != g.shape:
        raise ValueError("jaccard: shape mismatch")
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def surface_voxels(mask):
    """Boolean volume marking mask voxels with a face-adjacent background
    (the volume border counts as background)."""
    m = _as_binary(mask, "mask")
    interior = ndimage.binary_erosion(m, structure=_FACE_STRUCT, border_value=0)
    return m & ~interior


def surface_distances(pred, truth, spacing=(1.0, 1.0, 1.0)):
    """(average symmetric surface distance, 95% Hausdorff) between masks.

    Raises SurfaceUndefinedError if either mask is empty.
    """
    p = _as_binary(pred, "pred")
    g = _as_binary(truth, "truth")
    if p.shape != g.shape:
        raise ValueError("surface_distances: shape mismatch")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError("surface_distances: spacing must be three positive reals")
    if not p.any() or not g.any():
        raise SurfaceUndefinedError("surface_distances: empty mask has no surface")
    sp = surface_voxels(p)
    sg = surface_voxels(g)
    # exact EDT of the complement gives, at every voxel, the distance to the
    # nearest surface voxel of the other mask
    dt_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    dt_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    pooled = np.concatenate([dt_g[sp], dt_p[sg]])
    asd = float(pooled.mean())
    pooled.sort()
    rank = math.ceil(0.95 * pooled.size)  # 1-based nearest rank
    hd95 = float(pooled[rank - 1])
    return asd, hd95
