"""Dense float tensors with reverse-mode automatic differentiation.

Every differentiable operation the model needs is defined here, either as a
primitive with a hand-written gradient or as a composition of primitives.
Operations are recorded on a tape in execution order; ``backward`` walks the
tape in exact reverse order, so recording order doubles as the topological
order.  There is no other global state.

Tensors default to float32; build parameters with ``dtype=np.float64`` when
running gradient checks.
"""

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tape:
    """Ordered record of operations; cleared between optimization steps."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_ACTIVE = Tape()
_GRAD_ENABLED = True


def active_tape():
    return _ACTIVE


@contextmanager
def fresh_tape():
    """Run a block on its own tape (used once per training step)."""
    global _ACTIVE
    saved = _ACTIVE
    _ACTIVE = Tape()
    try:
        yield _ACTIVE
    finally:
        _ACTIVE = saved


@contextmanager
def no_grad():
    """Disable recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


class Tensor:
    """A dense row-major float array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype, order="C")
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        # asarray keeps 0-d scalars 0-d; ascontiguousarray would pad to (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"

    # operator sugar; non-Tensor operands become constants
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self))

    def __pow__(self, exponent):
        return power(self, exponent)


def constant(value, like=None, dtype=None):
    """Wrap raw data as a non-differentiable tensor, matching `like`'s dtype."""
    if dtype is None:
        dtype = like.data.dtype if like is not None else None
    return Tensor(value, requires_grad=False, dtype=dtype)


def _wrap(value, like):
    if isinstance(value, Tensor):
        return value
    return constant(value, like=like)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    g = np.asarray(g, dtype=t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


def _record(out, inputs, backward_fn):
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE.nodes.append((out, backward_fn))
    return out


def backward(loss):
    """Populate gradients of every reachable leaf of a scalar loss.

    Walks the active tape in reverse recording order.  Intermediate (node
    output) gradients are consumed as the walk passes them, so only leaves
    keep gradients; calling ``backward`` again without clearing leaf grads
    accumulates into them.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ShapeError("loss is not connected to the tape (requires_grad is False)")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(_ACTIVE.nodes):
        g = out.grad
        if g is None:
            continue
        out.grad = None
        fn(g)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives

def add(a, b):
    out = Tensor(a.data + b.data)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _record(out, (a, b), back)


def sub(a, b):
    out = Tensor(a.data - b.data)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _record(out, (a, b), back)


def neg(a):
    out = Tensor(-a.data)

    def back(g):
        _accumulate(a, -g)

    return _record(out, (a,), back)


def mul(a, b):
    out = Tensor(a.data * b.data)

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _record(out, (a, b), back)


def div(a, b):
    out = Tensor(a.data / b.data)

    def back(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _record(out, (a, b), back)


def power(a, exponent):
    """Elementwise power with a constant scalar exponent."""
    p = float(exponent)
    out = Tensor(a.data ** p)

    def back(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _record(out, (a,), back)


def exp(a):
    out = Tensor(np.exp(a.data))

    def back(g):
        _accumulate(a, g * out.data)

    return _record(out, (a,), back)


def log(a):
    out = Tensor(np.log(a.data))

    def back(g):
        _accumulate(a, g / a.data)

    return _record(out, (a,), back)


def abs_(a):
    out = Tensor(np.abs(a.data))

    def back(g):
        _accumulate(a, g * np.sign(a.data))

    return _record(out, (a,), back)


def tanh(a):
    out = Tensor(np.tanh(a.data))

    def back(g):
        _accumulate(a, g * (1.0 - out.data * out.data))

    return _record(out, (a,), back)


def sigmoid(a):
    # stable in both tails
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(out_data.astype(x.dtype))

    def back(g):
        _accumulate(a, g * out.data * (1.0 - out.data))

    return _record(out, (a,), back)


def gelu(a):
    """Exact (erf-based) GELU."""
    x = a.data
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    cdf = 0.5 * (1.0 + erf(x * inv_sqrt2))
    out = Tensor((x * cdf).astype(x.dtype))

    def back(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _accumulate(a, g * (cdf + x * pdf))

    return _record(out, (a,), back)


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = Tensor(np.matmul(a.data, b.data))

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, ga)
        _accumulate(b, gb)

    return _record(out, (a, b), back)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    out = Tensor(a.data.reshape(shape))

    def back(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _record(out, (a,), back)


def transpose(a, axes=None):
    used = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(used)))
    inverse = np.argsort(used)

    def back(g):
        _accumulate(a, g.transpose(inverse))

    return _record(out, (a,), back)


def reduce_sum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _record(out, (a,), back)


def reduce_mean(a, axis=None, keepdims=False):
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))

    def back(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.data.shape))

    return _record(out, (a,), back)


def take_rows(a, indices):
    """Gather rows along axis 0; gradient scatter-adds them back."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx])

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _record(out, (a,), back)


def put_rows(indices, rows, length):
    """Scatter rows into a zero tensor of `length` rows (MoE combine).

    Indices must be unique; the gradient of `rows` is a gather at `indices`.
    """
    idx = np.asarray(indices, dtype=np.intp)
    out_data = np.zeros((int(length),) + rows.data.shape[1:], dtype=rows.data.dtype)
    out_data[idx] = rows.data
    out = Tensor(out_data)

    def back(g):
        _accumulate(rows, g[idx])

    return _record(out, (rows,), back)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            _accumulate(t, g[tuple(sl)])

    return _record(out, tuple(tensors), back)


# ---------------------------------------------------------------------------
# composites

def softmax(a, axis=-1):
    """Row-stable softmax; rejects NaN input."""
    if np.isnan(a.data).any():
        raise NumericError("softmax received NaN input")
    shift = constant(a.data.max(axis=axis, keepdims=True), like=a)
    e = exp(sub(a, shift))
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ShapeError(f"layer_norm eps must be positive, got {eps}")
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, constant(eps, like=x)), -0.5)
    return add(mul(mul(centered, inv), gamma), beta)


def conv_patch(x, kernel):
    """Non-overlapping patch convolution: (C,W,H) -> (L, D) tokens.

    The stride equals the kernel's spatial size P, so each token is the
    flattened (C,P,P) patch dotted with each of the D filters.  Token order
    is row-major over the (W/P, H/P) patch grid.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv_patch expects (C,W,H) and (D,C,P,P), got {tuple(x.shape)} and {tuple(kernel.shape)}")
    c, w, h = x.shape
    d, kc, p, p2 = kernel.shape
    if p != p2:
        raise ShapeError(f"conv_patch kernel must be square, got {p}x{p2}")
    if kc != c:
        raise ShapeError(f"conv_patch channel mismatch: image has {c}, kernel expects {kc}")
    if w % p != 0 or h % p != 0:
        raise ShapeError(f"image size not divisible by patch size: W={w}, H={h}, P={p}")
    patches = patchify(x, p)
    return matmul(patches, transpose(reshape(kernel, (d, c * p * p))))


def patchify(x, p):
    """(..., C, W, H) -> (..., L, C*P*P) rows of flattened patches."""
    c, w, h = x.shape[-3:]
    lead = x.shape[:-3]
    n = len(lead)
    wb, hb = w // p, h // p
    t = reshape(x, lead + (c, wb, p, hb, p))
    t = transpose(t, tuple(range(n)) + (n + 1, n + 3, n, n + 2, n + 4))
    return reshape(t, lead + (wb * hb, c * p * p))


def unpatchify(tokens, p, channels, w, h):
    """(..., L, C*P*P) -> (..., C, W, H); exact inverse of `patchify`."""
    lead = tokens.shape[:-2]
    n = len(lead)
    wb, hb = w // p, h // p
    t = reshape(tokens, lead + (wb, hb, channels, p, p))
    t = transpose(t, tuple(range(n)) + (n + 2, n, n + 3, n + 1, n + 4))
    return reshape(t, lead + (channels, w, h))


def l1_loss(pred, target, mask):
    """Mean absolute error over positions selected by `mask`.

    `mask` is a 0/1 array broadcastable to `pred`; the denominator counts
    every selected element after broadcasting, so a (W,H) mask against a
    (C,W,H) prediction averages over channels as well.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.astype(pred.data.dtype)
    total = float(np.broadcast_to(m, pred.data.shape).sum())
    if total == 0:
        raise ShapeError("l1_loss mask selects no positions")
    diff = abs_(sub(pred, _wrap(target, pred)))
    masked = mul(diff, constant(m, like=pred))
    return div(reduce_sum(masked), constant(total, like=pred))


def bce_with_logits(logits, targets):
    """Mean binary cross entropy against {0,1} targets, stable for large logits."""
    z = logits.data
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=z.dtype)
    val = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray(val.mean(), dtype=z.dtype))
    n = z.size

    def back(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        _accumulate(logits, g * (s - y) / n)

    return _record(out, (logits,), back)


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy of (N,K) logits against integer labels (N,)."""
    z = logits.data
    lab = np.asarray(labels, dtype=np.intp)
    shift = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    logp = shift - logsum
    n = z.shape[0]
    out = Tensor(np.asarray(-logp[np.arange(n), lab].mean(), dtype=z.dtype))

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), lab] -= 1.0
        _accumulate(logits, g * p / n)

    return _record(out, (logits,), back)
