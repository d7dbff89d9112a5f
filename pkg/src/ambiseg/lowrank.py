"""Low-rank multivariate Gaussian over the flattened logit map.

The network's three distribution heads define, per volume,

    g ~ N(mu, F F^T + diag(d)),   mu, d in R^(V*C), F in R^(V*C, r)

with d = softplus(diag_raw) + 1e-5 so the diagonal stays strictly positive.
Flattening is class-major: entry index c*V + v holds (class c, voxel v), the
row-major order of the [C,H,W,D] head outputs. Sampling uses the
reparameterization g = mu + F e1 + sqrt(d) * e2 with standard normal e1, e2.

The supervised loss aggregates S Monte-Carlo samples through a log-sum-exp
of per-sample log-likelihoods: loss = -(LSE_s l_s) + log S, i.e. the negative
log of the sample-averaged likelihood.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, add, log_softmax, logsumexp, matmul, mul, neg,
                     reshape, softplus, transpose, tsum)

DIAG_FLOOR = 1e-5


@dataclass
class LogitGaussian:
    mu: Tensor       # [V*C]
    factor: Tensor   # [V*C, r]
    diag: Tensor     # [V*C], strictly positive
    V: int
    C: int
    r: int


def build_distribution(out):
    """Flatten a NetworkOutput (batch of one) into a LogitGaussian."""
    N, C, H, W, D = out.mean.data.shape
    if N != 1:
        raise ValueError("build_distribution: expects a single-volume batch")
    V = H * W * D
    Cr = out.factor.data.shape[1]
    if Cr % C != 0:
        raise ValueError("build_distribution: factor channels not divisible by C")
    r = Cr // C
    mu = reshape(out.mean, (V * C,))
    # factor channels are grouped class-major (c*r + j); reorder rows to the
    # same c*V + v order as mu
    f = reshape(out.factor, (C, r, V))
    f = transpose(f, (0, 2, 1))          # (C, V, r)
    factor = reshape(f, (V * C, r))
    diag = add(softplus(reshape(out.diag_raw, (V * C,))), DIAG_FLOOR)
    return LogitGaussian(mu=mu, factor=factor, diag=diag, V=V, C=C, r=r)


def sample_logits(dist, S, rng=None, noise=None):
    """Draw S reparameterized logit samples, stacked as rows of [S, V*C].

    Either `rng` draws the noise (e1 then e2, each standard normal) or
    `noise=(e1, e2)` supplies it frozen with shapes (S, r) and (S, V*C).
    """
    if S < 1:
        raise ValueError("sample_logits: need S >= 1")
    n = dist.V * dist.C
    if noise is not None:
        e1, e2 = noise
        e1 = np.asarray(e1, dtype=np.float64)
        e2 = np.asarray(e2, dtype=np.float64)
        if e1.shape != (S, dist.r) or e2.shape != (S, n):
            raise ValueError("sample_logits: frozen noise has wrong shape")
    else:
        if rng is None:
            raise ValueError("sample_logits: need rng or frozen noise")
        e1 = rng.standard_normal((S, dist.r))
        e2 = rng.standard_normal((S, n))
    ones = Tensor(np.ones((S, 1)))
    mu_row = reshape(dist.mu, (1, n))
    base = matmul(ones, mu_row)                       # (S, n) tiled mean
    lowrank = matmul(Tensor(e1), transpose(dist.factor))
    sd_row = reshape(dist.diag.sqrt(), (1, n))
    diag_part = mul(matmul(ones, sd_row), Tensor(e2))
    return add(add(base, lowrank), diag_part)


def sample_probability_maps(dist, S, rng=None, noise=None):
    """S soft segmentation maps [S, V, C]: softmax over classes of each sample."""
    from .tensor import softmax
    g = sample_logits(dist, S, rng=rng, noise=noise)
    g = reshape(g, (S, dist.C, dist.V))
    g = transpose(g, (0, 2, 1))
    return softmax(g)


def check_one_hot(labels, V, C):
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (V, C):
        raise ValueError(f"labels must be ({V},{C}) one-hot, got {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all() or not np.all(y.sum(axis=1) == 1.0):
        raise ValueError("labels must be one-hot rows")
    return y


def supervised_loss_au(dist, labels, S, rng=None, noise=None):
    """Monte-Carlo aleatoric-aware cross-entropy: -LSE_s(log p(y|g_s)) + log S.

    labels: one-hot array (V, C). Differentiates through mu, factor, diag.
    """
    y = check_one_hot(labels, dist.V, dist.C)
    g = sample_logits(dist, S, rng=rng, noise=noise)   # (S, V*C)
    g = reshape(g, (S, dist.C, dist.V))
    g = transpose(g, (0, 2, 1))                        # (S, V, C)
    ls = log_softmax(g)
    yb = Tensor(np.ascontiguousarray(np.broadcast_to(y, (S, dist.V, dist.C))))
    ll = tsum(mul(ls, yb), axis=(1, 2))                # (S,) per-sample log-lik
    return add(neg(logsumexp(ll)), math.log(S))
