"""Forward/backward numerical kernels.

Each primitive comes as ``op(...)`` (forward only) and ``op_vjp(...)`` which
returns ``(output, backward)``; ``backward(dy)`` gives the gradients with
respect to the inputs in argument order (``None`` for absent biases).
Convolution is cross-correlation; weights follow the (Cout, Cin/groups, kh, kw)
layout, transposed-conv weights (Cin, Cout/groups, kh, kw).

Ops that do arithmetic report to any active :class:`OpCounter`, which lets
the analytic FLOP model be checked against what a forward pass really does.
"""
from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .errors import DimensionError, InputError
from .tensor import check_finite

GELU_C = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-5

_COUNTERS: list["OpCounter"] = []


class OpCounter:
    """Context manager tallying multiply-accumulates and elementwise work."""

    def __init__(self):
        self.macs = Counter()
        self.elementwise = Counter()

    def __enter__(self):
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _COUNTERS.remove(self)

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())


def _count_macs(kind: str, n: int) -> None:
    for c in _COUNTERS:
        c.macs[kind] += int(n)


def _count_elementwise(kind: str, n: int) -> None:
    for c in _COUNTERS:
        c.elementwise[kind] += int(n)


def _window(start, stride, count):
    return slice(start, start + stride * (count - 1) + 1, stride)


# -- convolution -------------------------------------------------------------

def _conv_geometry(x, w, stride, pad, groups):
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got rank {x.ndim}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d expects rank-4 weights, got rank {w.ndim}")
    n, c, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if c % groups or cout % groups:
        raise DimensionError(
            f"groups={groups} must divide input channels (axis 1: {c}) and output channels (weight axis 0: {cout})")
    if c // groups != cin_g:
        raise DimensionError(f"input channels (axis 1: {c}) / groups {groups} != weight axis 1 ({cin_g})")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad} (axes 2,3)")
    return n, c, h, wd, cout, cin_g, kh, kw, ho, wo


def conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    n, c, h, wd, cout, cin_g, kh, kw, ho, wo = _conv_geometry(x, w, stride, pad, groups)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cout_g = cout // groups
    _count_macs("conv", n * cout * ho * wo * cin_g * kh * kw)
    if groups == 1:
        acc = np.zeros((n, ho, wo, cout), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, _window(i, stride, ho), _window(j, stride, wo)]
                acc += np.tensordot(xs, w[:, :, i, j], axes=([1], [1]))
        y = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    elif cin_g == 1 and cout_g == 1:
        y = np.zeros((n, cout, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, _window(i, stride, ho), _window(j, stride, wo)]
                y += xs * w[:, 0, i, j][None, :, None, None]
    else:
        y = np.zeros((n, groups, cout_g, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, _window(i, stride, ho), _window(j, stride, wo)]
                xs = xs.reshape(n, groups, cin_g, ho, wo)
                wij = w[:, :, i, j].reshape(groups, cout_g, cin_g)
                y += np.einsum("ngchw,goc->ngohw", xs, wij)
        y = y.reshape(n, cout, ho, wo)
    if b is not None:
        y += b[None, :, None, None]
    check_finite("conv2d", y)
    return y


def conv2d_backward(dy, x, w, stride=1, pad=0, groups=1, has_bias=True):
    n, c, h, wd, cout, cin_g, kh, kw, ho, wo = _conv_geometry(x, w, stride, pad, groups)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    cout_g = cout // groups
    if groups == 1:
        dyt = dy.transpose(0, 2, 3, 1)
        for i in range(kh):
            for j in range(kw):
                si, sj = _window(i, stride, ho), _window(j, stride, wo)
                dw[:, :, i, j] = np.tensordot(dyt, xp[:, :, si, sj], axes=([0, 1, 2], [0, 2, 3]))
                dxp[:, :, si, sj] += (dyt @ w[:, :, i, j]).transpose(0, 3, 1, 2)
    elif cin_g == 1 and cout_g == 1:
        for i in range(kh):
            for j in range(kw):
                si, sj = _window(i, stride, ho), _window(j, stride, wo)
                dw[:, 0, i, j] = (dy * xp[:, :, si, sj]).sum(axis=(0, 2, 3))
                dxp[:, :, si, sj] += dy * w[:, 0, i, j][None, :, None, None]
    else:
        dyg = dy.reshape(n, groups, cout_g, ho, wo)
        for i in range(kh):
            for j in range(kw):
                si, sj = _window(i, stride, ho), _window(j, stride, wo)
                xs = xp[:, :, si, sj].reshape(n, groups, cin_g, ho, wo)
                wij = w[:, :, i, j].reshape(groups, cout_g, cin_g)
                dw[:, :, i, j] = np.einsum("ngohw,ngchw->goc", dyg, xs).reshape(cout, cin_g)
                dxp[:, :, si, sj] += np.einsum("ngohw,goc->ngchw", dyg, wij).reshape(n, c, ho, wo)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


def conv2d_vjp(x, w, b=None, stride=1, pad=0, groups=1):
    y = conv2d(x, w, b, stride, pad, groups)

    def backward(dy):
        return conv2d_backward(dy, x, w, stride, pad, groups, has_bias=b is not None)

    return y, backward


def _tconv_geometry(x, w, stride, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("transposed_conv2d expects NCHW input and rank-4 weights")
    n, c, h, wd = x.shape
    cin, cout_g, kh, kw = w.shape
    if c % groups:
        raise DimensionError(f"groups={groups} must divide input channels (axis 1: {c})")
    if cin != c:
        raise DimensionError(f"input channels (axis 1: {c}) != weight axis 0 ({cin})")
    return n, c, h, wd, cout_g * groups, cout_g, kh, kw, (h - 1) * stride + kh, (wd - 1) * stride + kw


def transposed_conv2d(x, w, b=None, stride=1, groups=1):
    n, c, h, wd, cout, cout_g, kh, kw, ho, wo = _tconv_geometry(x, w, stride, groups)
    cin_g = c // groups
    _count_macs("deconv", n * c * h * wd * cout_g * kh * kw)
    if groups == 1:
        acc = np.zeros((n, ho, wo, cout), dtype=x.dtype)
        xt = x.transpose(0, 2, 3, 1)
        for i in range(kh):
            for j in range(kw):
                acc[:, _window(i, stride, h), _window(j, stride, wd)] += xt @ w[:, :, i, j]
        y = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    elif cin_g == 1 and cout_g == 1:
        y = np.zeros((n, cout, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                y[:, :, _window(i, stride, h), _window(j, stride, wd)] += x * w[:, 0, i, j][None, :, None, None]
    else:
        y = np.zeros((n, groups, cout_g, ho, wo), dtype=x.dtype)
        xg = x.reshape(n, groups, cin_g, h, wd)
        for i in range(kh):
            for j in range(kw):
                wij = w[:, :, i, j].reshape(groups, cin_g, cout_g)
                y[..., _window(i, stride, h), _window(j, stride, wd)] += np.einsum("ngchw,gco->ngohw", xg, wij)
        y = y.reshape(n, cout, ho, wo)
    if b is not None:
        y += b[None, :, None, None]
    check_finite("transposed_conv2d", y)
    return y


def transposed_conv2d_backward(dy, x, w, stride=1, groups=1, has_bias=True):
    n, c, h, wd, cout, cout_g, kh, kw, ho, wo = _tconv_geometry(x, w, stride, groups)
    cin_g = c // groups
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    if groups == 1:
        dx_t = np.zeros((n, h, wd, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                dys = dy[:, :, _window(i, stride, h), _window(j, stride, wd)]
                dx_t += np.tensordot(dys, w[:, :, i, j], axes=([1], [1]))
                dw[:, :, i, j] = np.tensordot(x, dys, axes=([0, 2, 3], [0, 2, 3]))
        dx = np.ascontiguousarray(dx_t.transpose(0, 3, 1, 2))
    elif cin_g == 1 and cout_g == 1:
        for i in range(kh):
            for j in range(kw):
                dys = dy[:, :, _window(i, stride, h), _window(j, stride, wd)]
                dx += dys * w[:, 0, i, j][None, :, None, None]
                dw[:, 0, i, j] = (x * dys).sum(axis=(0, 2, 3))
    else:
        xg = x.reshape(n, groups, cin_g, h, wd)
        dxg = dx.reshape(n, groups, cin_g, h, wd)
        dyg = dy.reshape(n, groups, cout_g, ho, wo)
        for i in range(kh):
            for j in range(kw):
                dys = dyg[..., _window(i, stride, h), _window(j, stride, wd)]
                wij = w[:, :, i, j].reshape(groups, cin_g, cout_g)
                dxg += np.einsum("ngohw,gco->ngchw", dys, wij)
                dw[:, :, i, j] = np.einsum("ngchw,ngohw->gco", xg, dys).reshape(c, cout_g)
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dw, db


def transposed_conv2d_vjp(x, w, b=None, stride=1, groups=1):
    y = transposed_conv2d(x, w, b, stride, groups)

    def backward(dy):
        return transposed_conv2d_backward(dy, x, w, stride, groups, has_bias=b is not None)

    return y, backward


def zero_insert(x, stride):
    """Place ``stride - 1`` zeros between neighbouring spatial elements."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=x.dtype)
    out[:, :, ::stride, ::stride] = x
    return out


# -- pooling -----------------------------------------------------------------

def _pool_geometry(x, k, stride):
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects NCHW input, got rank {x.ndim}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"pool window {k} exceeds input {h}x{w} (axes 2,3)")
    return n, c, h, w, (h - k) // stride + 1, (w - k) // stride + 1


def avg_pool2d(x, k, stride=None):
    stride = k if stride is None else stride
    n, c, h, w, ho, wo = _pool_geometry(x, k, stride)
    _count_elementwise("pool", x.size)
    if k == stride and h % k == 0 and w % k == 0:
        return x.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))
    y = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            y += x[:, :, _window(i, stride, ho), _window(j, stride, wo)]
    return y / (k * k)


def avg_pool2d_backward(dy, x_shape, k, stride=None):
    stride = k if stride is None else stride
    n, c, h, w = x_shape
    ho, wo = dy.shape[2:]
    scaled = dy / (k * k)
    if k == stride and h % k == 0 and w % k == 0:
        return np.ascontiguousarray(
            np.broadcast_to(scaled[:, :, :, None, :, None], (n, c, ho, k, wo, k)).reshape(n, c, h, w))
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, _window(i, stride, ho), _window(j, stride, wo)] += scaled
    return dx


def avg_pool2d_vjp(x, k, stride=None):
    y = avg_pool2d(x, k, stride)
    shape = x.shape
    return y, lambda dy: (avg_pool2d_backward(dy, shape, k, stride),)


# -- normalisation and activations -------------------------------------------

def layer_norm_vjp(x, gamma, beta, eps=LN_EPS, axis=1):
    """Normalise the channel vector at every position, then apply the affine."""
    axis = axis % x.ndim
    c = x.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: gamma/beta length {gamma.shape} != channels (axis {axis}: {c})")
    shape = [1] * x.ndim
    shape[axis] = c
    g = gamma.reshape(shape)
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * g + beta.reshape(shape)
    _count_elementwise("norm", x.size)
    check_finite("layer_norm", y)
    red = tuple(a for a in range(x.ndim) if a != axis)

    def backward(dy):
        dgamma = (dy * xhat).sum(axis=red)
        dbeta = dy.sum(axis=red)
        dxhat = dy * g
        dx = inv * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return dx, dgamma, dbeta

    return y, backward


def layer_norm(x, gamma, beta, eps=LN_EPS, axis=1):
    return layer_norm_vjp(x, gamma, beta, eps, axis)[0]


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    _count_elementwise("softmax", x.size)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy, y, axis=-1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def softmax_vjp(x, axis=-1):
    y = softmax(x, axis)
    return y, lambda dy: (softmax_backward(dy, y, axis),)


def gelu(x):
    """tanh-approximated GELU."""
    _count_elementwise("act", x.size)
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x ** 3)))


def gelu_backward(dy, x):
    t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def gelu_vjp(x):
    return gelu(x), lambda dy: (gelu_backward(dy, x),)


# -- dense algebra -------------------------------------------------------------

def linear(x, w, b=None):
    """Affine map on the trailing axis; ``w`` is (Cin, Cout)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input trailing dim {x.shape[-1]} != weight axis 0 ({w.shape[0]})")
    _count_macs("linear", x.size // x.shape[-1] * w.shape[0] * w.shape[1])
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_backward(dy, x, w, has_bias=True):
    cin, cout = w.shape
    dx = dy @ w.T
    dw = x.reshape(-1, cin).T @ dy.reshape(-1, cout)
    db = dy.reshape(-1, cout).sum(axis=0) if has_bias else None
    return dx, dw, db


def linear_vjp(x, w, b=None):
    y = linear(x, w, b)
    return y, lambda dy: linear_backward(dy, x, w, has_bias=b is not None)


def matmul(a, b):
    """Batched ``a @ b`` counted as attention arithmetic."""
    _count_macs("attn", a.size // a.shape[-1] * a.shape[-1] * b.shape[-1])
    return a @ b


def matmul_vjp(a, b):
    y = matmul(a, b)
    return y, lambda dy: (dy @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ dy)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` and its gradient w.r.t. logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InputError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"cross_entropy: labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n
