"""Composite learnable blocks: conv-stem, patch embedding, LFE, FD and FFN variants.

Every block exposes ``<name>_vjp(x, p) -> (y, backward)`` where
``backward(dy)`` accumulates parameter gradients into ``Tensor.grad`` and
returns the input gradient, plus a forward-only ``<name>_forward``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import ParamTree, RngState, Tensor

FFN_VARIANTS = ("ffn", "dwsffn", "ciffn")


@dataclass
class Conv(ParamTree):
    w: Tensor
    b: Optional[Tensor] = None
    stride: int = 1
    pad: int = 0
    groups: int = 1


@dataclass
class Dense(ParamTree):
    w: Tensor  # (Cin, Cout)
    b: Optional[Tensor] = None


@dataclass
class Norm(ParamTree):
    gamma: Tensor
    beta: Tensor


@dataclass
class ConvStemParams(ParamTree):
    conv0: Conv
    norm0: Norm
    conv1: Conv
    norm1: Norm
    conv2: Conv
    norm2: Norm


@dataclass
class PatchEmbedParams(ParamTree):
    conv: Conv
    norm: Norm


@dataclass
class LfeParams(ParamTree):
    dw: Conv


@dataclass
class FdParams(ParamTree):
    y_c: Tensor
    conv: Conv


@dataclass
class FfnVariantParams(ParamTree):
    variant: str
    norm: Norm
    expand: object  # Dense for "ffn", 1x1 Conv otherwise
    project: object
    dw: Optional[Conv] = None
    fd: Optional[FdParams] = None

    @property
    def hidden(self) -> int:
        w = self.expand.w
        return w.shape[1] if isinstance(self.expand, Dense) else w.shape[0]


# -- initialisation ------------------------------------------------------------

def init_conv(rng: RngState, cin, cout, k, stride=1, pad=0, groups=1, bias=True, dtype=np.float32) -> Conv:
    fan_out = k * k * cout // groups
    w = rng.normal((cout, cin // groups, k, k), std=math.sqrt(2.0 / fan_out), dtype=dtype)
    b = Tensor(np.zeros(cout, dtype)) if bias else None
    return Conv(Tensor(w), b, stride, pad, groups)


def init_dense(rng: RngState, cin, cout, dtype=np.float32) -> Dense:
    return Dense(Tensor(rng.trunc_normal((cin, cout), std=0.02, dtype=dtype)), Tensor(np.zeros(cout, dtype)))


def init_norm(c, dtype=np.float32) -> Norm:
    return Norm(Tensor(np.ones(c, dtype)), Tensor(np.zeros(c, dtype)))


def init_conv_stem(rng, c1, cin=3, dtype=np.float32) -> ConvStemParams:
    return ConvStemParams(
        init_conv(rng, cin, c1, 3, stride=2, pad=1, dtype=dtype), init_norm(c1, dtype),
        init_conv(rng, c1, c1, 3, pad=1, dtype=dtype), init_norm(c1, dtype),
        init_conv(rng, c1, c1, 3, pad=1, dtype=dtype), init_norm(c1, dtype),
    )


def init_patch_embed(rng, cin, cout, dtype=np.float32) -> PatchEmbedParams:
    return PatchEmbedParams(init_conv(rng, cin, cout, 3, stride=2, pad=1, dtype=dtype), init_norm(cout, dtype))


def init_lfe(rng, c, dtype=np.float32) -> LfeParams:
    return LfeParams(init_conv(rng, c, c, 3, pad=1, groups=c, dtype=dtype))


def init_fd(rng, c, dtype=np.float32) -> FdParams:
    return FdParams(Tensor(np.zeros(c, dtype)), init_conv(rng, c, c, 3, pad=1, groups=c, dtype=dtype))


def init_ffn(rng, c, variant="ciffn", ratio=4.0, dtype=np.float32) -> FfnVariantParams:
    if variant not in FFN_VARIANTS:
        raise ConfigError(f"unknown FFN variant {variant!r}; expected one of {FFN_VARIANTS}")
    hidden = int(round(ratio * c))
    if variant == "ffn":
        return FfnVariantParams(variant, init_norm(c, dtype), init_dense(rng, c, hidden, dtype),
                                init_dense(rng, hidden, c, dtype))
    return FfnVariantParams(
        variant, init_norm(c, dtype),
        init_conv(rng, c, hidden, 1, dtype=dtype),
        init_conv(rng, hidden, c, 1, dtype=dtype),
        dw=init_conv(rng, hidden, hidden, 3, pad=1, groups=hidden, dtype=dtype),
        fd=init_fd(rng, hidden, dtype) if variant == "ciffn" else None,
    )


# -- parameter-aware wrappers around the primitive ops ------------------------

def conv_vjp(x, c: Conv):
    y, back = ops.conv2d_vjp(x, c.w.data, None if c.b is None else c.b.data, c.stride, c.pad, c.groups)

    def backward(dy):
        dx, dw, db = back(dy)
        c.w.accumulate(dw)
        if c.b is not None:
            c.b.accumulate(db)
        return dx

    return y, backward


def dense_vjp(x, d: Dense):
    y, back = ops.linear_vjp(x, d.w.data, None if d.b is None else d.b.data)

    def backward(dy):
        dx, dw, db = back(dy)
        d.w.accumulate(dw)
        if d.b is not None:
            d.b.accumulate(db)
        return dx

    return y, backward


def norm_vjp(x, n: Norm, axis=1):
    y, back = ops.layer_norm_vjp(x, n.gamma.data, n.beta.data, axis=axis)

    def backward(dy):
        dx, dg, db = back(dy)
        n.gamma.accumulate(dg)
        n.beta.accumulate(db)
        return dx

    return y, backward


def gelu_vjp(x):
    y = ops.gelu(x)
    return y, lambda dy: ops.gelu_backward(dy, x)


def chain(x, *stages):
    """Run ``(fn, *args)`` stages in sequence; return output and a chained backward."""
    backs = []
    for fn, *args in stages:
        x, back = fn(x, *args)
        backs.append(back)

    def backward(dy):
        for back in reversed(backs):
            dy = back(dy)
        return dy

    return x, backward


def _require_channels(x, c, what):
    if x.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"{what}: input channels (axis 1) {x.shape[1] if x.ndim > 1 else None} != {c}")


def _require_even(x, what):
    if x.ndim != 4:
        raise DimensionError(f"{what}: expected NCHW input, got rank {x.ndim}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise DimensionError(f"{what}: spatial dims (axes 2,3) must be even, got {h}x{w}")


# -- blocks ----------------------------------------------------------------------

def conv_stem_vjp(x, p: ConvStemParams):
    _require_even(x, "conv_stem")
    return chain(x, (conv_vjp, p.conv0), (norm_vjp, p.norm0), (gelu_vjp,),
                 (conv_vjp, p.conv1), (norm_vjp, p.norm1), (gelu_vjp,),
                 (conv_vjp, p.conv2), (norm_vjp, p.norm2), (gelu_vjp,))


def patch_embed_vjp(x, p: PatchEmbedParams):
    _require_even(x, "patch_embed")
    return chain(x, (conv_vjp, p.conv), (norm_vjp, p.norm))


def lfe_vjp(x, p: LfeParams):
    """x + GELU(depthwise3x3(x))."""
    _require_channels(x, p.dw.w.shape[0], "lfe")
    h, back = chain(x, (conv_vjp, p.dw), (gelu_vjp,))
    return x + h, lambda dy: dy + back(dy)


def fd_vjp(x, p: FdParams):
    """y_c * (x + depthwise(x)) + x, with y_c broadcast per channel."""
    _require_channels(x, p.y_c.shape[0], "fd")
    d, back_conv = conv_vjp(x, p.conv)
    s = x + d
    yc = p.y_c.data[None, :, None, None]
    y = yc * s + x

    def backward(dy):
        p.y_c.accumulate((dy * s).sum(axis=(0, 2, 3)))
        ds = dy * yc
        return dy + ds + back_conv(ds)

    return y, backward


def _to_tokens_vjp(x):
    y = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    return y, lambda dy: np.ascontiguousarray(dy.transpose(0, 3, 1, 2))


def _from_tokens_vjp(x):
    y = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
    return y, lambda dy: np.ascontiguousarray(dy.transpose(0, 2, 3, 1))


def ffn_vjp(x, p: FfnVariantParams):
    """Pre-norm residual FFN in one of the three variants."""
    _require_channels(x, p.norm.gamma.shape[0], p.variant)
    if p.variant == "ffn":
        stages = [(norm_vjp, p.norm), (_to_tokens_vjp,), (dense_vjp, p.expand), (gelu_vjp,),
                  (dense_vjp, p.project), (_from_tokens_vjp,)]
    else:
        stages = [(norm_vjp, p.norm), (conv_vjp, p.expand), (conv_vjp, p.dw), (gelu_vjp,)]
        if p.variant == "ciffn":
            stages.append((fd_vjp, p.fd))
        stages.append((conv_vjp, p.project))
    h, back = chain(x, *stages)
    return x + h, lambda dy: dy + back(dy)


def _forward(vjp):
    def forward(x, p):
        return vjp(x, p)[0]

    forward.__name__ = vjp.__name__.replace("_vjp", "_forward")
    forward.__doc__ = vjp.__doc__
    return forward


conv_stem_forward = _forward(conv_stem_vjp)
patch_embed_forward = _forward(patch_embed_vjp)
lfe_forward = _forward(lfe_vjp)
fd_forward = _forward(fd_vjp)


def _ffn_kind(kind):
    def forward(x, p: FfnVariantParams):
        if p.variant != kind:
            raise ConfigError(f"{kind}_forward called with {p.variant!r} parameters")
        return ffn_vjp(x, p)[0]

    forward.__name__ = f"{kind}_forward"
    return forward


ffn_forward = _ffn_kind("ffn")
dwsffn_forward = _ffn_kind("dwsffn")
ciffn_forward = _ffn_kind("ciffn")
