"""Exponential-moving-average teacher and its input perturbation.

The teacher tracks the student parameter-wise:

    theta_t <- decay * theta_t + (1 - decay) * theta_s

with a constant decay (default 0.99). Its inputs get additive Gaussian noise
clamped to a fixed band, the usual perturbation for consistency training.
Teacher parameters never receive gradients; callers wrap them as constants.
"""

import numpy as np

from .tensor import Tensor


def ema_update(teacher_params, student_params, decay=0.99):
    """In-place EMA update of the teacher dict; returns it for chaining."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"ema_update: decay {decay} outside [0, 1)")
    if teacher_params.keys() != student_params.keys():
        raise ValueError("ema_update: parameter sets differ")
    for k, tv in teacher_params.items():
        sv = student_params[k]
        if tv.shape != sv.shape:
            raise ValueError(f"ema_update: shape mismatch for {k}")
        tv *= decay
        tv += (1.0 - decay) * sv
    return teacher_params


def perturb_input(volume, noise_std=0.1, clip=0.2, rng=None):
    """Add clamped Gaussian noise; accepts a Tensor or ndarray, returns same kind."""
    if rng is None:
        raise ValueError("perturb_input: rng required")
    if noise_std < 0 or clip < 0:
        raise ValueError("perturb_input: noise_std and clip must be >= 0")
    is_tensor = isinstance(volume, Tensor)
    data = volume.data if is_tensor else np.asarray(volume, dtype=np.float64)
    noise = np.clip(rng.standard_normal(data.shape) * noise_std, -clip, clip)
    out = data + noise
    return Tensor(out) if is_tensor else out
