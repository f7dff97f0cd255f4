"""Forward and backward kernels on raw numpy arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
maps the upstream gradient plus that cache to input gradients.  Arrays keep
whatever float dtype they arrive in, so the same code runs in 32-bit for
training and 64-bit for gradient checks.

The 3D convolution lowers to one GEMM per call over a channels-last column
buffer of shape ``(N*D'*H'*W', k^3*Cin)``.  That orientation keeps the long
dimension as the GEMM row count, which BLAS handles far better than a
short-and-wide product when the channel count is small.  The buffer is
rebuilt in the backward pass instead of cached, so peak memory stays near one
buffer per layer in flight.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InvalidConfigError, InvalidShapeError


# ---------------------------------------------------------------------------
# convolution


def conv_output_extent(extent, k, stride, padding):
    span = extent + 2 * padding - k
    if span < 0 or span % stride:
        raise InvalidShapeError(
            f"extent {extent} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integer output extent")
    return span // stride + 1


def _im2col(x, k, pad, stride, out_sp):
    """Rows = output voxels (n, z, y, x); columns = (kz, ky, kx, c)."""
    n, c, d, h, w = x.shape
    if pad >= 0:
        xcl = np.zeros((n, d + 2 * pad, h + 2 * pad, w + 2 * pad, c), x.dtype)
        xcl[:, pad:pad + d, pad:pad + h, pad:pad + w] = x.transpose(0, 2, 3, 4, 1)
    else:
        q = -pad
        xcl = np.ascontiguousarray(x[:, :, q:d - q, q:h - q, q:w - q].transpose(0, 2, 3, 4, 1))
    do, ho, wo = out_sp
    sn, sd, sh, sw, sc = xcl.strides
    # for a fixed (kz, ky) the (kx, c) entries are one contiguous run of k*c values
    view = as_strided(xcl, (n, do, ho, wo, k, k, k * c),
                      (sn, sd * stride, sh * stride, sw * stride, sd, sh, sc),
                      writeable=False)
    return np.ascontiguousarray(view).reshape(n * do * ho * wo, k * k * k * c)


def _weight_matrix(w):
    return w.transpose(0, 2, 3, 4, 1).reshape(w.shape[0], -1)


def _conv(x, w, b, stride, pad, out_sp):
    cout = w.shape[0]
    cols = _im2col(x, w.shape[2], pad, stride, out_sp)
    out = cols @ _weight_matrix(w).T
    if b is not None:
        out += b
    out = out.reshape((x.shape[0],) + tuple(out_sp) + (cout,))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def conv3d_forward(x, w, b, stride=1, padding=0):
    if x.ndim != 5 or w.ndim != 5:
        raise InvalidShapeError("conv3d expects rank-5 input and weight")
    cin = x.shape[1]
    cout, wcin, k = w.shape[0], w.shape[1], w.shape[2]
    if wcin != cin:
        raise InvalidShapeError(f"input has {cin} channels, weight expects {wcin}")
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise InvalidShapeError(f"kernel must be cubic with odd extent, got {w.shape[2:]}")
    if b.shape != (cout,):
        raise InvalidShapeError(f"bias shape {b.shape} does not match {cout} output channels")
    if stride < 1:
        raise InvalidShapeError("stride must be >= 1")
    if padding < 0:
        raise InvalidShapeError("padding must be >= 0")
    out_sp = tuple(conv_output_extent(s, k, stride, padding) for s in x.shape[2:])
    out = _conv(x, w, b, stride, padding, out_sp)
    return out, (x, w, stride, padding, out_sp)


def conv3d_backward(grad, cache, need_dx=True):
    """Gradients w.r.t. (input, weight, bias); the input gradient is a
    stride-1 convolution of the zero-dilated upstream gradient with the
    flipped, channel-transposed kernel."""
    x, w, stride, padding, out_sp = cache
    n, cin = x.shape[:2]
    cout, k = w.shape[0], w.shape[2]
    gm = np.ascontiguousarray(grad.transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
    db = gm.sum(axis=0)
    cols = _im2col(x, k, padding, stride, out_sp)
    dw = (gm.T @ cols).reshape(cout, k, k, k, cin).transpose(0, 4, 1, 2, 3)
    del cols
    dx = None
    if need_dx:
        if stride > 1:
            dil = np.zeros((n, cout) + tuple((s - 1) * stride + 1 for s in out_sp), grad.dtype)
            dil[:, :, ::stride, ::stride, ::stride] = grad
        else:
            dil = grad
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        dx = _conv(dil, wf, None, 1, k - 1 - padding, x.shape[2:])
    return dx, np.ascontiguousarray(dw), db


# ---------------------------------------------------------------------------
# resampling and pooling


def upsample2x_forward(x):
    n, c, d, h, w = x.shape
    out = np.broadcast_to(x[:, :, :, None, :, None, :, None], (n, c, d, 2, h, 2, w, 2))
    return out.reshape(n, c, 2 * d, 2 * h, 2 * w), x.shape


def upsample2x_backward(grad, shape):
    n, c, d, h, w = shape
    return grad.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7))


def maxpool2x_forward(x):
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise InvalidShapeError(f"max-pool needs even spatial extents, got {(d, h, w)}")
    blocks = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8)
    # argmax returns the first maximum, i.e. first in (z, y, x) scan order
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2x_backward(grad, cache):
    idx, shape = cache
    n, c, d, h, w = shape
    blocks = np.zeros(idx.shape + (8,), dtype=grad.dtype)
    np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
    blocks = blocks.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
    return blocks.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(shape)


def global_avg_pool_forward(x):
    return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2), x.shape


def global_avg_pool_backward(grad, shape):
    vox = int(np.prod(shape[2:]))
    return np.broadcast_to((grad / vox)[:, :, None, None, None], shape).copy()


def global_max_pool_forward(x):
    flat = x.reshape(x.shape[0], x.shape[1], -1)
    idx = flat.argmax(axis=2)
    return np.take_along_axis(flat, idx[..., None], axis=2)[..., 0], (idx, x.shape)


def global_max_pool_backward(grad, cache):
    idx, shape = cache
    flat = np.zeros((shape[0], shape[1], int(np.prod(shape[2:]))), dtype=grad.dtype)
    np.put_along_axis(flat, idx[..., None], grad[..., None], axis=2)
    return flat.reshape(shape)


def channel_mean_forward(x):
    return x.mean(axis=1, keepdims=True), x.shape


def channel_mean_backward(grad, shape):
    return np.broadcast_to(grad / shape[1], shape).copy()


def channel_max_forward(x):
    idx = x.argmax(axis=1)[:, None]
    return np.take_along_axis(x, idx, axis=1), (idx, x.shape)


def channel_max_backward(grad, cache):
    idx, shape = cache
    out = np.zeros(shape, dtype=grad.dtype)
    np.put_along_axis(out, idx, grad, axis=1)
    return out


# ---------------------------------------------------------------------------
# pointwise


def elu_forward(x, alpha=1.0):
    neg = alpha * np.expm1(np.minimum(x, 0))
    return np.where(x > 0, x, neg), (x, neg, alpha)


def elu_backward(grad, cache):
    x, neg, alpha = cache
    return grad * np.where(x > 0, 1, neg + alpha).astype(grad.dtype, copy=False)


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(grad, x):
    return grad * (x > 0)


def sigmoid_forward(x):
    # split on sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
    return y.astype(x.dtype, copy=False), y


def sigmoid_backward(grad, y):
    return grad * y * (1 - y)


def softmax_forward(x):
    if x.ndim != 2 or x.shape[1] < 2:
        raise InvalidShapeError(f"softmax expects [N, K>=2], got {x.shape}")
    z = np.exp(x - x.max(axis=1, keepdims=True))
    y = z / z.sum(axis=1, keepdims=True)
    return y, y


def softmax_backward(grad, y):
    return y * (grad - (grad * y).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# normalization, dense, dropout


def group_norm_forward(x, gamma, beta, groups, eps=1e-5):
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise InvalidConfigError(f"{c} channels are not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidShapeError("gamma/beta must have one entry per channel")
    xg = x.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out, (xhat, inv, gamma, groups)


def group_norm_backward(grad, cache):
    xhat, inv, gamma, groups = cache
    n, c = xhat.shape[:2]
    axes = (0,) + tuple(range(2, xhat.ndim))
    dgamma = (grad * xhat).sum(axis=axes)
    dbeta = grad.sum(axis=axes)
    bshape = (1, c) + (1,) * (xhat.ndim - 2)
    dxhat = (grad * gamma.reshape(bshape)).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                - xh * (dxhat * xh).mean(axis=2, keepdims=True))
    return dx.reshape(xhat.shape), dgamma, dbeta


def linear_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise InvalidShapeError(f"cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise InvalidShapeError(f"bias shape {b.shape} does not match {w.shape[1]} outputs")
    return x @ w + b, (x, w)


def linear_backward(grad, cache):
    x, w = cache
    return grad @ w.T, x.T @ grad, grad.sum(axis=0)


def dropout_mask(shape, p, seed, dtype):
    if not 0 <= p < 1:
        raise InvalidConfigError(f"dropout rate must lie in [0, 1), got {p}")
    rng = np.random.default_rng(seed)
    keep = rng.random(shape) >= p
    return (keep / (1 - p)).astype(dtype)

