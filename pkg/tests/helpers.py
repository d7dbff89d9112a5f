"""Shared test utilities: central-difference gradient checking.

The checker treats the computation as a black-box scalar function of its
leaf arrays and compares analytic gradients against (f(x+h)-f(x-h))/2h at
every coordinate. Relative error is guarded by 1.0 in the denominator so
near-zero gradients are compared absolutely.
"""

import numpy as np

from ambiseg.tensor import Tape, Tensor


def eval_scalar(build, arrays):
    tape = Tape()
    leaves = [Tensor(a, tape=tape) for a in arrays]
    return build(*leaves).item()


def grad_check(build, arrays, h=1e-4):
    """Worst relative error between tape gradients and central differences.

    build(*leaves) must return a scalar Tensor and must not capture any
    randomness of its own (the same arrays must give the same value).
    """
    tape = Tape()
    leaves = [Tensor(a, requires_grad=True, tape=tape) for a in arrays]
    tape.backward(build(*leaves))
    analytic = [np.zeros_like(a) if lf.grad is None else lf.grad.copy()
                for a, lf in zip(arrays, leaves)]
    worst = 0.0
    work = [a.copy() for a in arrays]
    for k, arr in enumerate(work):
        flat = arr.reshape(-1)
        ga = analytic[k].reshape(-1)
        for i in range(flat.size):
            kept = flat[i]
            flat[i] = kept + h
            fp = eval_scalar(build, work)
            flat[i] = kept - h
            fm = eval_scalar(build, work)
            flat[i] = kept
            numeric = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - numeric) / max(abs(ga[i]), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst
