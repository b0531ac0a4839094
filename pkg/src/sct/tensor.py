"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything downstream (encoder, transformer, losses) is built from the ops
in this module. Ops only record onto a tape when one is active and some
input requires gradients; evaluation therefore runs as plain numpy.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Backward called on a tensor that is not a recorded scalar."""


_STATE = threading.local()


def _active_tape():
    stack = getattr(_STATE, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable ops.

    Eager execution appends nodes in topological order, so one reversed
    sweep propagates gradients with each node visited exactly once.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_STATE, "tapes", None)
        if stack is None:
            stack = _STATE.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)


class Node:
    __slots__ = ("out", "inputs", "backward_fn", "tape", "index")

    def __init__(self, out, inputs, backward_fn, tape):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tape = tape
        self.index = len(tape.nodes)


class Tensor:
    """N-dimensional float64 value, optionally tracked for differentiation.

    ``grad`` is allocated lazily on first backward touch and accumulates
    across backward calls until reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "producer")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.producer = None

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

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __neg__(self):
        return neg(self)

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, inputs, backward_fn):
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    node = Node(out, inputs, backward_fn, tape)
    out.producer = node
    tape.nodes.append(node)
    return out


def backward(loss):
    """Propagate d(loss)/d(x) to every leaf reachable from ``loss``.

    Leaf tensors (requires_grad, no producer) accumulate into ``.grad``;
    intermediate gradients live only for the duration of the sweep, so
    repeated calls never double-count shared subgraphs.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.producer is None:
        raise TapeError("loss is not on an active tape (no recorded producer)")
    tape = loss.producer.tape
    # tape nodes hold strong refs to every tensor touched, so id() keys are stable
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.producer.index + 1]):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if t.producer is None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gt
            else:
                key = id(t)
                if key in pending:
                    # new array: first insertion may alias a view of g
                    pending[key] = pending[key] + gt
                else:
                    pending[key] = gt


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def _same_shape(a, b, opname):
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ")


def _sum_to(g, shape):
    # reduce a gradient back to the shape of a scalar operand
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _sum_to(g, a.data.shape), _sum_to(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _sum_to(g, a.data.shape), _sum_to(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def neg(a):
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _sum_to(g * b.data, a.data.shape), _sum_to(g * a.data, b.data.shape)

    return _record(out, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _sum_to(g / b.data, a.data.shape)
        gb = _sum_to(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def broadcast_to(a, shape):
    """Explicit broadcast; callers expand shapes themselves by design."""
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    in_shape = a.data.shape

    def bwd(g):
        extra = g.ndim - len(in_shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(in_shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _record(out, (a,), bwd)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    in_shape = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(in_shape),))


def transpose(a, axes):
    out = Tensor(np.transpose(a.data, axes))
    inverse = np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, idx):
    out = Tensor(a.data[idx])

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        return (buf,)

    return _record(out, (a,), bwd)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bwd(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] for i in range(len(tensors)))

    return _record(out, tuple(tensors), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _record(out, tuple(tensors), bwd)


def take_rows(a, indices):
    """Gather rows of a 2-d tensor; rows may repeat (scatter-add backward)."""
    indices = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[indices])

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, indices, g)
        return (buf,)

    return _record(out, (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    in_shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _record(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), bwd)


def bmm(a, b):
    """Batched matmul over a shared leading axis: [B,m,k] @ [B,k,n]."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[2] != b.data.shape[1] \
            or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"bmm: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _record(out, (a, b), bwd)


def conv2d(x, kernels, bias=None, stride=1, padding=0):
    """2-d cross-correlation over [B,Cin,H,W] (or a single [Cin,H,W]) input.

    Shift-and-matmul: one [B*Ho*Wo, Cin] GEMM per kernel offset, with the
    shifted input blocks cached for the kernel-gradient pass.
    """
    squeeze = x.data.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.data.shape)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(
            f"conv2d: need [B,Cin,H,W] and [Cout,Cin,kh,kw], got "
            f"{x.data.shape} and {kernels.data.shape}"
        )
    batch, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernels.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: channel mismatch {x.data.shape} vs {kernels.data.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {(kh, kw)} larger than padded input "
            f"{(h + 2 * padding, w + 2 * padding)}"
        )
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    m = batch * ho * wo
    shifted = []  # (u, v, [M, Cin]) blocks, reused by the backward pass
    acc = np.zeros((m, cout))
    kflat = kernels.data.reshape(cout, cin, kh * kw)
    for u in range(kh):
        for v in range(kw):
            block = np.ascontiguousarray(
                xp[:, :, u : u + ho * stride : stride, v : v + wo * stride : stride]
                .transpose(0, 2, 3, 1)
            ).reshape(m, cin)
            shifted.append(block)
            acc += block @ kflat[:, :, u * kw + v].T
    out_data = np.ascontiguousarray(acc.reshape(batch, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = [x, kernels]
    if bias is not None:
        out_data += bias.data[None, :, None, None]
        inputs.append(bias)
    out = Tensor(out_data)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(m, cout)
        dk = np.empty_like(kernels.data)
        dxp = np.zeros_like(xp)
        for idx, (u, v) in enumerate((u, v) for u in range(kh) for v in range(kw)):
            dk[:, :, u, v] = gmat.T @ shifted[idx]
            dblock = (gmat @ kflat[:, :, u * kw + v]).reshape(batch, ho, wo, cin)
            dxp[:, :, u : u + ho * stride : stride, v : v + wo * stride : stride] += \
                dblock.transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    out = _record(out, tuple(inputs), bwd)
    if squeeze:
        out = reshape(out, out.data.shape[1:])
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def _sigmoid_raw(x):
    # tanh form: stable at both tails, one vectorized call
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    y = _sigmoid_raw(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a):
    """x * sigmoid(x); smooth, so finite-difference checks stay clean."""
    s = _sigmoid_raw(a.data)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,))


def exp(a):
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a):
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def clamp(a, lo, hi):
    y = np.clip(a.data, lo, hi)
    out = Tensor(y)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


def softmax(a, axis=-1):
    """Max-subtracted softmax along ``axis``; rows sum to one."""
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), bwd)


def layer_normalize(a, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        dgain = np.sum(g * xhat, axis=tuple(range(g.ndim - 1)))
        dbias = np.sum(g, axis=tuple(range(g.ndim - 1)))
        gx = g * gain.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = (gx - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return _record(out, (a, gain, bias), bwd)


def channel_normalize(a, gain, bias, eps=1e-5):
    """Layer normalization over axis 1 of a [B,C,H,W] tensor.

    Equivalent to transposing channels last, normalizing, and transposing
    back, without the copies.
    """
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    gain_col = gain.data[None, :, None, None]
    out = Tensor(xhat * gain_col + bias.data[None, :, None, None])

    def bwd(g):
        dgain = np.sum(g * xhat, axis=(0, 2, 3))
        dbias = np.sum(g, axis=(0, 2, 3))
        gx = g * gain_col
        m1 = gx.mean(axis=1, keepdims=True)
        m2 = (gx * xhat).mean(axis=1, keepdims=True)
        dx = (gx - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return _record(out, (a, gain, bias), bwd)


def dropout(a, p, rng):
    """Inverted dropout: scale kept activations by 1/(1-p) at train time."""
    if p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * keep)
    return _record(out, (a,), lambda g: (g * keep,))
