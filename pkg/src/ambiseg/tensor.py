"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous row-major float64 numpy array. Differentiable
operations append a backward rule to an explicit Tape; Tape.backward(loss)
replays the rules once, in reverse recording order, accumulating gradients
into every tensor that requires them. All reductions run in numpy's fixed
sequential order, so identical inputs give bit-identical results.

Broadcasting in the elementwise ops is restricted to scalar-vs-tensor and
identical shapes. Structured operations (matmul, conv3d, gather, softmax,
per-voxel normalization, ...) carry their own dedicated backward rules.
"""

import math

import numpy as np
from scipy.special import expit


def _require_finite(arr, what):
    # cheap first pass: a single reduction catches NaN/inf almost always
    if not math.isfinite(float(arr.sum())):
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite values produced by {what}")


class Tape:
    """Ordered record of backward rules for one forward computation.

    Single-threaded, single-use: backward() may be called once, after which
    the tape refuses further recording.
    """

    __slots__ = ("_rules", "_spent")

    def __init__(self):
        self._rules = []
        self._spent = False

    def _record(self, rule):
        if self._spent:
            raise RuntimeError("tape already consumed by backward()")
        self._rules.append(rule)

    def __len__(self):
        return len(self._rules)

    def backward(self, loss):
        """Seed d(loss)/d(loss) = 1 and push gradients to every recorded input."""
        if not isinstance(loss, Tensor):
            raise TypeError("backward() needs a Tensor loss")
        if loss.data.shape != ():
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        if self._spent:
            raise RuntimeError("tape already consumed by backward()")
        self._spent = True
        loss.grad = np.ones((), dtype=np.float64)
        for rule in reversed(self._rules):
            rule()
        # the rule closures capture every intermediate Tensor, and those
        # Tensors reference this tape; dropping the rules breaks the cycle so
        # plain refcounting frees the whole graph without waiting for gc
        self._rules.clear()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False, tape=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # keeps 0-d scalars 0-d
            arr = np.ascontiguousarray(arr)
        _require_finite(arr, "tensor construction")
        if requires_grad and tape is None:
            raise ValueError("a tensor that requires grad must live on a tape")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = tape

    # -- plumbing ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; numbers are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def softplus(self):
        return softplus(self)

    def sqrt(self):
        # composed from the primitive set; valid for strictly positive input
        return exp(mul(log(self), 0.5))

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def take(self, indices):
        return take(self, indices)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _merge_tape(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    return tape


def _result(data, inputs, make_rule):
    """Build the output tensor and record `make_rule(out)` if grads are needed."""
    tape = _merge_tape(*inputs)
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg, tape=tape)
    if rg and tape is not None:
        tape._record(make_rule(out))
    return out


def _check_elementwise_shapes(a, b, opname):
    # restricted broadcasting: identical shapes, or one side scalar
    if a.data.shape == b.data.shape:
        return
    if a.data.shape == () or b.data.shape == ():
        return
    raise ValueError(
        f"{opname}: shapes {a.data.shape} and {b.data.shape} are neither equal "
        "nor scalar-vs-tensor"
    )


def _reduce_to(g, shape):
    # gradient for a scalar operand of a broadcast elementwise op
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


# -- elementwise ops -------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise_shapes(a, b, "add")

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            a._accum(_reduce_to(g, a.data.shape))
            b._accum(_reduce_to(g, b.data.shape))

        return run

    return _result(a.data + b.data, (a, b), rule)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise_shapes(a, b, "sub")

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            a._accum(_reduce_to(g, a.data.shape))
            b._accum(_reduce_to(-g, b.data.shape))

        return run

    return _result(a.data - b.data, (a, b), rule)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            a._accum(_reduce_to(g * bd, a.data.shape))
            b._accum(_reduce_to(g * ad, b.data.shape))

        return run

    return _result(ad * bd, (a, b), rule)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise_shapes(a, b, "div")
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: zero divisor")
    ad, bd = a.data, b.data

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            a._accum(_reduce_to(g / bd, a.data.shape))
            b._accum(_reduce_to(-g * ad / (bd * bd), b.data.shape))

        return run

    return _result(ad / bd, (a, b), rule)


def neg(a):
    a = _as_tensor(a)

    def rule(out):
        def run():
            if out.grad is not None:
                a._accum(-out.grad)

        return run

    return _result(-a.data, (a,), rule)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0.0

    def rule(out):
        def run():
            if out.grad is not None:
                a._accum(out.grad * mask)

        return run

    return _result(np.where(mask, a.data, 0.0), (a,), rule)


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is caught by the finiteness check
        val = np.exp(a.data)

    def rule(out):
        def run():
            if out.grad is not None:
                a._accum(out.grad * val)

        return run

    return _result(val, (a,), rule)


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: nonpositive input")

    def rule(out):
        def run():
            if out.grad is not None:
                a._accum(out.grad / a.data)

        return run

    return _result(np.log(a.data), (a,), rule)


def softplus(a):
    """log(1 + e^x), evaluated stably; gradient is the logistic sigmoid."""
    a = _as_tensor(a)
    val = np.logaddexp(0.0, a.data)

    def rule(out):
        def run():
            if out.grad is not None:
                a._accum(out.grad * expit(a.data))

        return run

    return _result(val, (a,), rule)


# -- reductions and shape ops ----------------------------------------------


def tsum(a, axis=None):
    """Sum over all elements (axis=None, scalar result) or over given axes."""
    a = _as_tensor(a)
    if axis is None:
        def rule(out):
            def run():
                if out.grad is not None:
                    a._accum(np.broadcast_to(out.grad, a.data.shape))

            return run

        return _result(a.data.sum(), (a,), rule)

    axes = (axis,) if isinstance(axis, int) else tuple(axis)

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            ge = np.expand_dims(g, axes)
            a._accum(np.broadcast_to(ge, a.data.shape))

        return run

    return _result(a.data.sum(axis=axes), (a,), rule)


def mean(a, axis=None):
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    return mul(tsum(a, axis), 1.0 / float(n))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape

    def rule(out):
        def run():
            if out.grad is not None:
                a._accum(out.grad.reshape(old))

        return run

    return _result(a.data.reshape(shape), (a,), rule)


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def rule(out):
        def run():
            if out.grad is not None:
                a._accum(np.ascontiguousarray(out.grad.transpose(inv)))

        return run

    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), rule)


def take(a, indices):
    """Gather from the flattened (row-major) data; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("take: need a nonempty 1-D index array")
    if idx.min() < 0 or idx.max() >= a.data.size:
        raise IndexError("take: index out of range")

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            buf = np.zeros(a.data.size, dtype=np.float64)
            np.add.at(buf, idx, g)
            a._accum(buf.reshape(a.data.shape))

        return run

    return _result(a.data.ravel()[idx], (a,), rule)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(np.ascontiguousarray(g[tuple(sl)]))

        return run

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def stack(tensors):
    """Stack same-shape tensors along a new leading axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack: empty input list")

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            for i, t in enumerate(tensors):
                t._accum(g[i])

        return run

    return _result(np.stack([t.data for t in tensors]), tensors, rule)


# -- linear algebra --------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul: both operands must be 2-D")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims differ {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            a._accum(g @ bd.T)
            b._accum(ad.T @ g)

        return run

    return _result(ad @ bd, (a, b), rule)


# -- softmax family --------------------------------------------------------


def softmax(a):
    """Softmax over the last axis; rows land exactly on the simplex."""
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    val = e / e.sum(axis=-1, keepdims=True)

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            dot = (g * val).sum(axis=-1, keepdims=True)
            a._accum(val * (g - dot))

        return run

    return _result(val, (a,), rule)


def log_softmax(a):
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True)) + m
    val = x - lse
    soft = np.exp(val)

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            a._accum(g - soft * g.sum(axis=-1, keepdims=True))

        return run

    return _result(val, (a,), rule)


def logsumexp(a):
    """log(sum(exp(x))) of a 1-D tensor, max-shifted for stability."""
    a = _as_tensor(a)
    if a.data.ndim != 1 or a.data.size == 0:
        raise ValueError("logsumexp: need a nonempty 1-D tensor")
    x = a.data
    m = x.max()
    val = m + np.log(np.exp(x - m).sum())
    soft = np.exp(x - val)

    def rule(out):
        def run():
            if out.grad is not None:
                a._accum(out.grad * soft)

        return run

    return _result(np.float64(val), (a,), rule)


# -- convolution -----------------------------------------------------------


def _conv3d_shape(H, W, D, k, stride, padding):
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    Do = (D + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1 or Do < 1:
        raise ValueError("conv3d: kernel does not fit in padded input")
    return Ho, Wo, Do


def conv3d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of [N,Ci,H,W,D] with [Co,Ci,k,k,k], odd cubic k.

    Implemented as im2col + one BLAS matmul; the column matrix is kept for
    the backward rules.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValueError("conv3d: input must be [N,Ci,H,W,D], kernel [Co,Ci,k,k,k]")
    N, Ci, H, W, D = x.data.shape
    Co, Ciw, k, k2, k3 = w.data.shape
    if not (k == k2 == k3):
        raise ValueError("conv3d: kernel must be cubic")
    if k % 2 != 1:
        raise ValueError("conv3d: kernel size must be odd")
    if Ci != Ciw:
        raise ValueError(f"conv3d: channel mismatch input {Ci} vs kernel {Ciw}")
    if b is not None and b.data.shape != (Co,):
        raise ValueError("conv3d: bias must have shape (Co,)")
    Ho, Wo, Do = _conv3d_shape(H, W, D, k, stride, padding)
    P = Ho * Wo * Do

    if k == 1 and stride == 1 and padding == 0:
        # 1x1x1 conv is a plain channel matmul; skip the im2col copy
        xm = x.data.reshape(N, Ci, P)
        wm = w.data.reshape(Co, Ci)
        out = np.einsum("ncp,oc->nop", xm, wm, optimize=True)
        out = out.reshape(N, Co, Ho, Wo, Do)
        if b is not None:
            out = out + b.data.reshape(1, Co, 1, 1, 1)

        def rule1(outt):
            def run():
                g = outt.grad
                if g is None:
                    return
                gm = g.reshape(N, Co, P)
                x._accum(np.einsum("nop,oc->ncp", gm, wm, optimize=True)
                         .reshape(N, Ci, H, W, D))
                w._accum(np.einsum("nop,ncp->oc", gm, xm, optimize=True)
                         .reshape(Co, Ci, 1, 1, 1))
                if b is not None:
                    b._accum(gm.sum(axis=(0, 2)))

            return run

        inputs = (x, w) if b is None else (x, w, b)
        return _result(out, inputs, rule1)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]  # (N,Ci,Ho,Wo,Do,k,k,k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    cols = cols.reshape(N * P, Ci * k * k * k)
    wmat = w.data.reshape(Co, Ci * k * k * k)
    out = cols @ wmat.T  # (N*P, Co)
    out = np.ascontiguousarray(
        out.reshape(N, Ho, Wo, Do, Co).transpose(0, 4, 1, 2, 3)
    )
    if b is not None:
        out = out + b.data.reshape(1, Co, 1, 1, 1)

    def rule(outt):
        def run():
            g = outt.grad
            if g is None:
                return
            gmat = np.ascontiguousarray(
                g.transpose(0, 2, 3, 4, 1)
            ).reshape(N * P, Co)
            w._accum((gmat.T @ cols).reshape(Co, Ci, k, k, k))
            if b is not None:
                b._accum(gmat.sum(axis=0))
            if x.requires_grad:
                dcols = gmat @ wmat  # (N*P, Ci*k^3)
                d6 = dcols.reshape(N, Ho, Wo, Do, Ci, k, k, k)
                d6 = d6.transpose(0, 4, 1, 2, 3, 5, 6, 7)
                dxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            dxp[:, :,
                                i:i + stride * Ho:stride,
                                j:j + stride * Wo:stride,
                                l:l + stride * Do:stride] += d6[..., i, j, l]
                if padding:
                    dxp = dxp[:, :, padding:padding + H,
                              padding:padding + W, padding:padding + D]
                x._accum(np.ascontiguousarray(dxp))

        return run

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, rule)


def conv_transpose3d(x, w, b=None, stride=1):
    """Transposed conv of [N,Ci,X,Y,Z] with kernel [Ci,Co,k,k,k] (no padding).

    Output spatial size is (X-1)*stride + k. Forward scatters each input
    voxel's contribution over a k^3 window; the offset loop is vectorized
    over the whole volume.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValueError("conv_transpose3d: input [N,Ci,X,Y,Z], kernel [Ci,Co,k,k,k]")
    N, Ci, X, Y, Z = x.data.shape
    Ciw, Co, k, k2, k3 = w.data.shape
    if not (k == k2 == k3):
        raise ValueError("conv_transpose3d: kernel must be cubic")
    if Ci != Ciw:
        raise ValueError("conv_transpose3d: channel mismatch")
    if b is not None and b.data.shape != (Co,):
        raise ValueError("conv_transpose3d: bias must have shape (Co,)")
    Xo = (X - 1) * stride + k
    Yo = (Y - 1) * stride + k
    Zo = (Z - 1) * stride + k

    out = np.zeros((N, Co, Xo, Yo, Zo), dtype=np.float64)
    xd = x.data
    for i in range(k):
        for j in range(k):
            for l in range(k):
                out[:, :,
                    i:i + stride * X:stride,
                    j:j + stride * Y:stride,
                    l:l + stride * Z:stride] += np.einsum(
                        "ncxyz,co->noxyz", xd, w.data[:, :, i, j, l],
                        optimize=True)
    if b is not None:
        out = out + b.data.reshape(1, Co, 1, 1, 1)

    def rule(outt):
        def run():
            g = outt.grad
            if g is None:
                return
            dx = np.zeros_like(xd)
            dw = np.zeros_like(w.data)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gs = g[:, :,
                               i:i + stride * X:stride,
                               j:j + stride * Y:stride,
                               l:l + stride * Z:stride]
                        dx += np.einsum("noxyz,co->ncxyz", gs,
                                        w.data[:, :, i, j, l], optimize=True)
                        dw[:, :, i, j, l] = np.einsum(
                            "ncxyz,noxyz->co", xd, gs, optimize=True)
            x._accum(dx)
            w._accum(dw)
            if b is not None:
                b._accum(g.sum(axis=(0, 2, 3, 4)))

        return run

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, rule)


# -- per-voxel feature normalization ---------------------------------------


def unit_normalize(x, eps=1e-8):
    """Scale each channel vector (axis 1) to unit length, flooring the norm.

    Input [N,C,H,W,D]; each voxel's C-vector is divided by max(||v||, eps),
    so an all-zero vector maps to zero instead of NaN. Subgradient
    convention: voxels at or below the floor pass no gradient (the literal
    1/eps slope would be a 1e8 amplifier on degenerate all-zero features).
    """
    x = _as_tensor(x)
    if x.data.ndim != 5:
        raise ValueError("unit_normalize: input must be [N,C,H,W,D]")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    val = x.data / denom
    big = norm > eps

    def rule(out):
        def run():
            g = out.grad
            if g is None:
                return
            dot = (g * val).sum(axis=1, keepdims=True)
            inside = (g - val * dot) / denom
            x._accum(np.where(big, inside, 0.0))

        return run

    return _result(val, (x,), rule)
