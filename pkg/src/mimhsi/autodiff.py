"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Everything runs in 64-bit. Forward ops append nodes to a global tape;
grad() replays the tape once in reverse append order and then discards it.
Any op that produces NaN/Inf raises NumericError instead of propagating it.
"""

from __future__ import annotations

import numpy as np


class NumericError(ArithmeticError):
    """An operation produced a non-finite value (error state, not a value)."""


class Node:
    """One tape entry: op tag, produced tensor, inputs, backward closure."""

    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPE: list[Node] = []
_GRAD_ENABLED = True


class no_grad:
    """Context manager that pauses tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def tape_size():
    return len(_TAPE)


def clear_tape():
    _TAPE.clear()


class Tensor:
    """N-dimensional float64 value, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op, data):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by '{op}'")


def record(op, out_data, inputs, backward):
    """Create the output tensor of a primitive and register its tape node.

    `backward(out_grad) -> [grad_or_None per input]`; gradients are
    accumulated by the tape walker, so backward closures stay pure.
    """
    _check_finite(op, out_data)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _TAPE.append(Node(op, out, inputs, backward))
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return record("add", out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]

    return record("sub", out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return [_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)]

    return record("mul", out, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return [ga, gb]

    return record("div", out, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        return [-g]

    return record("neg", -a.data, (a,), backward)


def power(a, exponent):
    """Elementwise a**exponent for a fixed float exponent."""
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p

    def backward(g):
        return [g * p * a.data ** (p - 1.0)]

    return record("power", out, (a,), backward)


# -- matmul ------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy batch broadcasting; both operands ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return [ga, gb]

    return record("matmul", out, (a, b), backward)


# -- nonlinearities ----------------------------------------------------------


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid_np(a.data)

    def backward(g):
        return [g * s * (1.0 - s)]

    return record("sigmoid", s, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)

    def backward(g):
        return [g * (1.0 - t * t)]

    return record("tanh", t, (a,), backward)


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)

    def backward(g):
        return [g * e]

    return record("exp", e, (a,), backward)


def silu(a):
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    out = a.data * s

    def backward(g):
        return [g * (s + a.data * s * (1.0 - s))]

    return record("silu", out, (a,), backward)


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        return [g * _sigmoid_np(a.data)]

    return record("softplus", out, (a,), backward)


_EXPM1X_CUT = 1e-6


def _expm1_over_x_np(z):
    small = np.abs(z) < _EXPM1X_CUT
    zs = np.where(small, 1.0, z)
    out = np.where(small, 1.0 + 0.5 * z, np.expm1(zs) / zs)
    return out


def expm1_over_x(a):
    """(exp(z) - 1) / z with a two-term Taylor branch below |z| = 1e-6.

    This is the zero-order-hold factor; the removable singularity at z = 0
    would otherwise cancel catastrophically.
    """
    a = as_tensor(a)
    z = a.data
    out = _expm1_over_x_np(z)

    def backward(g):
        small = np.abs(z) < _EXPM1X_CUT
        zs = np.where(small, 1.0, z)
        d = np.where(small, 0.5 + z / 3.0, (np.exp(zs) * (zs - 1.0) + 1.0) / (zs * zs))
        return [g * d]

    return record("expm1_over_x", out, (a,), backward)


# -- reductions --------------------------------------------------------------


def _restore_axes(g, axis, keepdims, shape):
    if keepdims or axis is None:
        return np.broadcast_to(g.reshape([1] * len(shape)) if axis is None and not keepdims else g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        return [_restore_axes(g, axis, keepdims, a.shape).copy()]

    return record("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax % a.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        return [_restore_axes(g, axis, keepdims, a.shape) / count]

    return record("mean", np.asarray(out), (a,), backward)


def max_(a, axis, keepdims=False):
    """Max along one axis; ties route the gradient to the first maximum."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(buf, np.expand_dims(idx, axis), gk, axis=axis)
        return [buf]

    return record("max", out, (a,), backward)


def softmax(a, axis=-1):
    """Numerically stable softmax; slices along `axis` sum to one."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return [s * (g - dot)]

    return record("softmax", s, (a,), backward)


def cross_entropy_with_softmax(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits).

    logits: Tensor[B, K]; labels: int array of shape [B].
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError("logits must be [batch, classes]")
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError("labels must be [batch]")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    picked = logits.data[np.arange(b), labels]
    out = np.asarray((lse - picked).mean())

    def backward(g):
        sm = np.exp(shifted)
        sm /= sm.sum(axis=1, keepdims=True)
        sm[np.arange(b), labels] -= 1.0
        return [g * sm / b]

    return record("cross_entropy", out, (logits,), backward)


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return [g.reshape(a.shape)]

    return record("reshape", out, (a,), backward)


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2).copy()

    def backward(g):
        return [np.swapaxes(g, ax1, ax2)]

    return record("swapaxes", out, (a,), backward)


def reverse(a, axis):
    """Flip along one axis (its own inverse)."""
    a = as_tensor(a)
    out = np.flip(a.data, axis=axis).copy()

    def backward(g):
        return [np.flip(g, axis=axis)]

    return record("reverse", out, (a,), backward)


def concatenate(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return list(np.split(g, splits, axis=axis))

    return record("concatenate", out, tuple(tensors), backward)


def slice_(a, key):
    """Basic indexing (ints and slices only); backward scatters into zeros."""
    a = as_tensor(a)
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        return [buf]

    return record("slice", out.copy(), (a,), backward)


def index_select(a, axis, indices):
    """Gather along `axis`; duplicates in `indices` accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        key = (slice(None),) * (axis % a.ndim) + (idx,)
        np.add.at(buf, key, g)
        return [buf]

    return record("index_select", out, (a,), backward)


# -- structured ops ----------------------------------------------------------


def conv1d_depthwise_causal(seq, taps):
    """Per-channel causal convolution: out[t, d] = sum_k taps[k, d] * seq[t-K+1+k, d].

    seq: [..., L, D]; taps: [K, D]. The left edge is zero-padded with K-1
    steps, so out[t] never depends on seq[t'] for t' > t.
    """
    seq, taps = as_tensor(seq), as_tensor(taps)
    k, d = taps.shape
    length = seq.shape[-2]
    if seq.shape[-1] != d:
        raise ValueError("channel mismatch between seq and taps")
    pad = [(0, 0)] * (seq.ndim - 2) + [(k - 1, 0), (0, 0)]
    padded = np.pad(seq.data, pad)
    out = np.zeros_like(seq.data)
    for i in range(k):
        out += taps.data[i] * padded[..., i : i + length, :]

    def backward(g):
        gseq_padded = np.zeros_like(padded)
        gtaps = np.zeros_like(taps.data)
        lead = tuple(range(g.ndim - 2))
        for i in range(k):
            gseq_padded[..., i : i + length, :] += taps.data[i] * g
            contrib = g * padded[..., i : i + length, :]
            gtaps[i] = contrib.sum(axis=lead + (-2,))
        return [gseq_padded[..., k - 1 :, :], gtaps]

    return record("conv1d_causal", out, (seq, taps), backward)


def _pool_matrix(p, p2):
    """Row-averaging matrix for adaptive pooling: window i covers
    [floor(i*p/p2), ceil((i+1)*p/p2))."""
    m = np.zeros((p2, p))
    for i in range(p2):
        lo = (i * p) // p2
        hi = -((-(i + 1) * p) // p2)  # ceil((i+1)*p/p2)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x, p2):
    """Average-pool [..., p, p, D] to [..., p2, p2, D] with odd p, p2."""
    x = as_tensor(x)
    p = x.shape[-3]
    if x.shape[-2] != p:
        raise ValueError("expected square spatial grid")
    if p % 2 == 0 or p2 % 2 == 0:
        raise ValueError("adaptive_avg_pool2d requires odd sizes")
    if not (1 <= p2 <= p):
        raise ValueError("output size must satisfy 1 <= p2 <= p")
    r = _pool_matrix(p, p2)
    out = np.einsum("ir,jc,...rcd->...ijd", r, r, x.data, optimize=True)

    def backward(g):
        return [np.einsum("ir,jc,...ijd->...rcd", r, r, g, optimize=True)]

    return record("adaptive_avg_pool2d", out, (x,), backward)


# -- gradient driver ---------------------------------------------------------


def grad(loss, params):
    """d(loss)/d(param) for each param; the tape is consumed.

    Params that never reached the loss get exact zeros (not an error).
    """
    if loss.size != 1:
        raise ValueError("grad() needs a scalar loss")
    for p in params:
        p.grad = None
    for node in _TAPE:
        node.out.grad = None
        for t in node.inputs:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_TAPE):
        g = node.out.grad
        if g is None:
            continue
        for t, gt in zip(node.inputs, node.backward(g)):
            if gt is None or not t.requires_grad:
                continue
            t.grad = gt if t.grad is None else t.grad + gt
    result = [
        Tensor(p.grad.copy()) if p.grad is not None else Tensor(np.zeros_like(p.data))
        for p in params
    ]
    _TAPE.clear()
    return result


def finite_diff_grad(f, x, step=1e-5):
    """Central-difference gradient of a scalar-valued f at x (the oracle path).

    f must be deterministic; it is evaluated with recording paused so the
    probe passes never touch the tape.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    g = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    with no_grad():
        while not it.finished:
            idx = it.multi_index
            xp = base.copy()
            xp[idx] += step
            xm = base.copy()
            xm[idx] -= step
            fp = f(Tensor(xp)).item()
            fm = f(Tensor(xm)).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("finite_diff_grad: function returned non-finite value")
            g[idx] = (fp - fm) / (2.0 * step)
            it.iternext()
    return Tensor(g)


def rel_error(a, b, floor=1e-6):
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a)
    b = np.asarray(b.data if isinstance(b, Tensor) else b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
