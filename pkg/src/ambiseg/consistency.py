"""Energy-distance consistency between two sets of sampled segmentations.

The per-pair distance is a generalized Dice discrepancy on soft maps,

    d(a, b) = 1 - sum(a*b) / (sum(a*a) + sum(b*b)),

which makes d(y, y) = 0.5 rather than 0; the generalized energy distance

    GED(A, B) = 2 sum_st d(a_s, b_t) - sum_ss' d(a_s, a_s') - sum_tt' d(b_t, b_t')

cancels those diagonals, so GED(A, A) = 0 and duplicate-heavy sets still
compare correctly. All S^2 ordered pairs, diagonals included, enter each sum.

The consistency weight follows a Gaussian ramp exp(-5 (1 - t/t_max)^2) scaled
by a maximum weight, so regularization phases in softly over training.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, div, matmul, mul, reshape, sub, take, transpose, tsum


def gdice_distance(a, b):
    """Dice-style discrepancy between two soft maps of identical shape."""
    if a.data.shape != b.data.shape:
        raise ValueError("gdice_distance: shape mismatch")
    num = tsum(mul(a, b))
    den = add(tsum(mul(a, a)), tsum(mul(b, b)))
    return sub(1.0, div(num, den))


def _pair_distance_sum(A, B):
    """Sum of d(a_s, b_t) over all S^2 ordered pairs, via one Gram matrix.

    A, B: [S, V*C]. Uses d(a,b) = 1 - <a,b>/(|a|^2+|b|^2); the row norms are
    the Gram diagonals, and the denominator matrix is built with two
    rank-one matmuls so everything stays on the tape.
    """
    S = A.data.shape[0]
    G = matmul(A, transpose(B))                       # (S, S) inner products
    na = tsum(mul(A, A), axis=(1,))                   # (S,) squared norms
    nb = tsum(mul(B, B), axis=(1,))
    ones_row = Tensor(np.ones((1, S)))
    ones_col = Tensor(np.ones((S, 1)))
    den = add(matmul(reshape(na, (S, 1)), ones_row),
              matmul(ones_col, reshape(nb, (1, S))))  # den[s,t] = |a_s|^2+|b_t|^2
    d = sub(1.0, div(G, den))
    return tsum(d)


def ged_consistency(student, teacher):
    """Generalized energy distance between sample sets [S, V, C].

    The teacher set must be detached (no gradient); the student set keeps its
    tape so gradients flow into the student only.
    """
    if student.data.shape != teacher.data.shape:
        raise ValueError("ged_consistency: sample sets differ in shape")
    if student.data.ndim != 3:
        raise ValueError("ged_consistency: expected [S, V, C] sample sets")
    if teacher.requires_grad:
        raise ValueError("ged_consistency: teacher samples must be detached")
    S, V, C = student.data.shape
    A = reshape(student, (S, V * C))
    B = reshape(teacher, (S, V * C))
    cross = _pair_distance_sum(A, B)
    within_s = _pair_distance_sum(A, A)
    within_t = _pair_distance_sum(B, B)
    return sub(sub(mul(cross, 2.0), within_s), within_t)


@dataclass(frozen=True)
class RampSchedule:
    max_weight: float
    t_max: int

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("RampSchedule: t_max must be >= 1")
        if self.max_weight < 0:
            raise ValueError("RampSchedule: max_weight must be >= 0")


def ramp_weight(t, sched):
    """Gaussian warmup: max_weight * exp(-5 (1 - t/t_max)^2), t in [0, t_max]."""
    if t < 0 or t > sched.t_max:
        raise ValueError(f"ramp_weight: t={t} outside [0, {sched.t_max}]")
    frac = 1.0 - t / sched.t_max
    return sched.max_weight * math.exp(-5.0 * frac * frac)


def aua_loss(sup, con, t, sched):
    """Stage-1 combination: supervised term plus ramped consistency term."""
    return add(sup, mul(con, ramp_weight(t, sched)))
