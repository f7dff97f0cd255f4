"""Tensor values, the recording tape and the differentiable operations.

Operations are plain functions.  When a :class:`Tape` is active (``with
Tape() as tape:``) and at least one input requires a gradient, the op appends
a record holding its inputs, its output and a closure mapping the output
gradient to input gradients.  :func:`backward` replays those records in
reverse order.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .errors import InvalidConfigError, InvalidShapeError, InvalidUseError

MAX_RANK = 5


class Tensor:
    """Dense array of rank <= 5 with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > MAX_RANK:
            raise InvalidShapeError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise InvalidUseError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    Used as a context manager; tapes nest, and only the innermost one records.
    """

    _active: list[Tape] = []

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, backward):
        if id(output) in self._outputs:
            raise InvalidUseError(f"{op}: output tensor already recorded on this tape")
        self._outputs.add(id(output))
        self.records.append(_Record(op, tuple(inputs), output, backward))

    @classmethod
    def current(cls):
        return cls._active[-1] if cls._active else None


def emit_op(op, out_data, inputs, backward):
    out = Tensor(out_data)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def backward(tape, loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor.

    Leaves (tensors never produced on the tape) that require gradients end up
    with a gradient array even when they do not influence ``loss``; it is all
    zeros in that case.  Intermediate gradients are released once consumed.
    """
    if loss.data.size != 1:
        raise InvalidUseError(f"loss must be a scalar, got shape {loss.shape}")
    if id(loss) not in tape._outputs:
        raise InvalidUseError("loss was not produced on this tape")

    leaves = {}
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and id(t) not in tape._outputs:
                leaves[id(t)] = t
    for t in leaves.values():
        t.grad = None
    for rec in tape.records:
        rec.output.grad = None

    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise InvalidShapeError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}")
            if t.grad is None:
                t.grad = np.array(gi, dtype=t.dtype, copy=True)
            else:
                t.grad += gi
        if rec.output is not loss:
            rec.output.grad = None
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return leaves


# ---------------------------------------------------------------------------
# layer primitives


def conv3d(x, weight, bias, stride=1, padding=0):
    out, cache = K.conv3d_forward(x.data, weight.data, bias.data, stride, padding)
    return emit_op("conv3d", out, (x, weight, bias),
                 lambda g: K.conv3d_backward(g, cache, need_dx=x.requires_grad))


def upsample_nearest_2x(x):
    out, shape = K.upsample2x_forward(x.data)
    return emit_op("upsample_nearest_2x", out, (x,), lambda g: (K.upsample2x_backward(g, shape),))


def maxpool3d_2x(x):
    out, cache = K.maxpool2x_forward(x.data)
    return emit_op("maxpool3d_2x", out, (x,), lambda g: (K.maxpool2x_backward(g, cache),))


def global_avg_pool(x):
    out, shape = K.global_avg_pool_forward(x.data)
    return emit_op("global_avg_pool", out, (x,), lambda g: (K.global_avg_pool_backward(g, shape),))


def global_max_pool(x):
    out, cache = K.global_max_pool_forward(x.data)
    return emit_op("global_max_pool", out, (x,), lambda g: (K.global_max_pool_backward(g, cache),))


def channel_mean(x):
    out, shape = K.channel_mean_forward(x.data)
    return emit_op("channel_mean", out, (x,), lambda g: (K.channel_mean_backward(g, shape),))


def channel_max(x):
    out, cache = K.channel_max_forward(x.data)
    return emit_op("channel_max", out, (x,), lambda g: (K.channel_max_backward(g, cache),))


def elu(x, alpha=1.0):
    out, cache = K.elu_forward(x.data, alpha)
    return emit_op("elu", out, (x,), lambda g: (K.elu_backward(g, cache),))


def relu(x):
    out, cache = K.relu_forward(x.data)
    return emit_op("relu", out, (x,), lambda g: (K.relu_backward(g, cache),))


def sigmoid(x):
    out, y = K.sigmoid_forward(x.data)
    return emit_op("sigmoid", out, (x,), lambda g: (K.sigmoid_backward(g, y),))


def pointwise_activation(x, kind, alpha=1.0):
    kind = kind.lower()
    if kind == "elu":
        return elu(x, alpha)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x):
    out, y = K.softmax_forward(x.data)
    return emit_op("softmax", out, (x,), lambda g: (K.softmax_backward(g, y),))


def group_norm(x, gamma, beta, groups=8, eps=1e-5):
    out, cache = K.group_norm_forward(x.data, gamma.data, beta.data, groups, eps)
    return emit_op("group_norm", out, (x, gamma, beta), lambda g: K.group_norm_backward(g, cache))


def linear(x, weight, bias):
    out, cache = K.linear_forward(x.data, weight.data, bias.data)
    return emit_op("linear", out, (x, weight, bias), lambda g: K.linear_backward(g, cache))


def dropout(x, p, training, rng_seed):
    if not 0 <= p < 1:
        raise InvalidConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    mask = K.dropout_mask(x.shape, p, rng_seed, x.dtype)
    return emit_op("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def concat_channels(a, b):
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise InvalidShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return emit_op("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def add(a, b):
    if a.shape != b.shape:
        raise InvalidShapeError(f"cannot add {a.shape} and {b.shape}")
    return emit_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def _unbroadcast(g, shape):
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def mul(a, b):
    """Elementwise product; either side may have extent 1 where the other does not."""
    if a.ndim != b.ndim or any(x != y and 1 not in (x, y) for x, y in zip(a.shape, b.shape)):
        raise InvalidShapeError(f"cannot multiply {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return emit_op("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x, c):
    c = float(c)
    return emit_op("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def reshape(x, shape):
    old = x.shape
    return emit_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_all(x):
    shape = x.shape
    return emit_op("sum", np.asarray(x.data.sum()).reshape(()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x):
    shape, n = x.shape, x.data.size
    return emit_op("mean", np.asarray(x.data.mean()).reshape(()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def select_rows(x, rows):
    """Gather entries of the leading axis; gradients scatter back (and add up for repeats)."""
    idx = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return emit_op("select_rows", x.data[idx], (x,), back)
