"""Multi-head attention and the spatial-reduction strategies built on it.

``saa``     pool the whole normalised map by ``sr``, attend over the pooled
            tokens, restore resolution with a depthwise transposed conv.
``sra``     queries from every position, keys/values from the pooled map.
``window``  full attention inside non-overlapping ``win x win`` windows.
``mhsa``    plain pre-norm attention over all positions.

All four are pre-norm residual blocks on NCHW maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .blocks import Conv, Dense, Norm, dense_vjp, init_dense, init_norm, norm_vjp
from .errors import ConfigError, DimensionError
from .tensor import ParamTree, RngState, Tensor

ATTENTION_KINDS = ("saa", "sra", "window", "mhsa")


@dataclass
class MhsaParams(ParamTree):
    q: Dense
    k: Dense
    v: Dense
    o: Dense
    heads: int

    @property
    def dim(self) -> int:
        return self.q.w.shape[0]


@dataclass
class AttentionParams(ParamTree):
    """Pre-norm attention block; ``sr``/``deconv`` configure SAA, ``win`` windows."""

    kind: str
    norm: Norm
    mhsa: MhsaParams
    sr: int = 1
    win: int = 0
    deconv: Optional[Conv] = None


class Trace:
    """Collects per-call attention records when passed into a forward."""

    def __init__(self, keep_weights=False):
        self.keep_weights = keep_weights
        self.records: list[dict] = []

    def add(self, **rec):
        self.records.append(rec)


def init_mhsa(rng: RngState, c, heads, dtype=np.float32) -> MhsaParams:
    if heads < 1 or c % heads:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    return MhsaParams(*(init_dense(rng, c, c, dtype) for _ in range(4)), heads=heads)


def init_attention(rng: RngState, c, heads, kind="saa", sr=1, win=7, dtype=np.float32) -> AttentionParams:
    if kind not in ATTENTION_KINDS:
        raise ConfigError(f"unknown attention kind {kind!r}; expected one of {ATTENTION_KINDS}")
    if sr < 1:
        raise ConfigError(f"sr must be a positive integer, got {sr}")
    mhsa = init_mhsa(rng, c, heads, dtype)
    deconv = None
    if kind == "saa" and sr > 1:
        w = rng.normal((c, 1, sr, sr), std=math.sqrt(2.0 / (sr * sr)), dtype=dtype)
        deconv = Conv(Tensor(w), Tensor(np.zeros(c, dtype)), stride=sr, groups=c)
    return AttentionParams(kind, init_norm(c, dtype), mhsa,
                           sr=sr if kind in ("saa", "sra") else 1,
                           win=win if kind == "window" else 0, deconv=deconv)


def _split_heads(t, heads):
    n, l, c = t.shape
    return t.reshape(n, l, heads, c // heads).transpose(0, 2, 1, 3)


def _merge_heads(t):
    n, h, l, d = t.shape
    return t.transpose(0, 2, 1, 3).reshape(n, l, h * d)


def mhsa_vjp(xq, xkv, p: MhsaParams, trace: Optional[Trace] = None):
    """Attention of ``xq`` tokens over ``xkv`` tokens, both (N, L, C).

    ``backward(dy)`` returns ``(dxq, dxkv)``.
    """
    c = xq.shape[-1]
    if c % p.heads:
        raise ConfigError(f"channels {c} not divisible by heads {p.heads}")
    if c != p.dim or xkv.shape[-1] != c:
        raise DimensionError(f"attention: token dim (axis 2) {c} != projection dim {p.dim}")
    h = p.heads
    scale = 1.0 / math.sqrt(c // h)
    q, back_q = dense_vjp(xq, p.q)
    k, back_k = dense_vjp(xkv, p.k)
    v, back_v = dense_vjp(xkv, p.v)
    qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    scores, back_s = ops.matmul_vjp(qh, np.swapaxes(kh, -1, -2))
    attn = ops.softmax(scores * scale, axis=-1)
    oh, back_o = ops.matmul_vjp(attn, vh)
    out, back_out = dense_vjp(_merge_heads(oh), p.o)
    if trace is not None:
        trace.add(q_tokens=xq.shape[1], kv_tokens=xkv.shape[1], heads=h,
                  weights=attn if trace.keep_weights else None)

    def backward(dy):
        doh = _split_heads(back_out(dy), h)
        dattn, dvh = back_o(doh)
        dscores = ops.softmax_backward(dattn, attn, axis=-1) * scale
        dqh, dkh_t = back_s(dscores)
        dxq = back_q(_merge_heads(dqh))
        dxkv = back_k(_merge_heads(np.swapaxes(dkh_t, -1, -2))) + back_v(_merge_heads(dvh))
        return dxq, dxkv

    return out, backward


def mhsa_forward(tokens, p: MhsaParams, trace=None):
    return mhsa_vjp(tokens, tokens, p, trace)[0]


def _to_tokens(x):
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1).reshape(n, h * w, c))


def _from_tokens(t, h, w):
    n, _, c = t.shape
    return np.ascontiguousarray(t.reshape(n, h, w, c).transpose(0, 3, 1, 2))


def _check_divisible(x, f, what):
    h, w = x.shape[2:]
    if h % f or w % f:
        raise DimensionError(f"{what}: spatial dims {h}x{w} (axes 2,3) not divisible by {f}")


def _self_tokens(x, p, trace):
    """Self-attention over every position of an NCHW map; backward takes a map."""
    t = _to_tokens(x)
    y, back = mhsa_vjp(t, t, p, trace)
    h, w = x.shape[2:]

    def backward(dy_map):
        dq, dkv = back(_to_tokens(dy_map))
        return _from_tokens(dq + dkv, h, w)

    return y, backward


def saa_vjp(x, p: AttentionParams, trace: Optional[Trace] = None):
    sr = p.sr
    _check_divisible(x, sr, "saa")
    n_, back_norm = norm_vjp(x, p.norm)
    if sr > 1:
        pooled, back_pool = ops.avg_pool2d_vjp(n_, sr)
    else:
        pooled, back_pool = n_, lambda d: (d,)
    ph, pw = pooled.shape[2:]
    att, back_att = _self_tokens(pooled, p.mhsa, trace)
    att = _from_tokens(att, ph, pw)
    if sr > 1:
        d = p.deconv
        up, back_up = ops.transposed_conv2d_vjp(att, d.w.data, d.b.data, d.stride, d.groups)
    else:
        up, back_up = att, None
    y = up + x

    def backward(dy):
        if back_up is not None:
            datt, dw, db = back_up(dy)
            p.deconv.w.accumulate(dw)
            p.deconv.b.accumulate(db)
        else:
            datt = dy
        dpooled = back_att(datt)
        return dy + back_norm(back_pool(dpooled)[0])

    return y, backward


def sra_vjp(x, p: AttentionParams, trace: Optional[Trace] = None):
    sr = p.sr
    _check_divisible(x, sr, "sra")
    h, w = x.shape[2:]
    n_, back_norm = norm_vjp(x, p.norm)
    tq = _to_tokens(n_)
    if sr > 1:
        pooled, back_pool = ops.avg_pool2d_vjp(n_, sr)
        tkv = _to_tokens(pooled)
        ph, pw = pooled.shape[2:]
    else:
        tkv = tq
    att, back_att = mhsa_vjp(tq, tkv, p.mhsa, trace)
    y = _from_tokens(att, h, w) + x

    def backward(dy):
        dq, dkv = back_att(_to_tokens(dy))
        dn = _from_tokens(dq, h, w)
        if sr > 1:
            dn = dn + back_pool(_from_tokens(dkv, ph, pw))[0]
        else:
            dn = dn + _from_tokens(dkv, h, w)
        return dy + back_norm(dn)

    return y, backward


def _partition(x, win):
    n, c, h, w = x.shape
    t = x.reshape(n, c, h // win, win, w // win, win).transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(t.reshape(n * (h // win) * (w // win), win * win, c))


def _unpartition(t, shape, win):
    n, c, h, w = shape
    x = t.reshape(n, h // win, w // win, win, win, c).transpose(0, 5, 1, 3, 2, 4)
    return np.ascontiguousarray(x.reshape(n, c, h, w))


def window_vjp(x, p: AttentionParams, trace: Optional[Trace] = None):
    win = p.win
    if win < 1:
        raise ConfigError(f"window size must be positive, got {win}")
    _check_divisible(x, win, "window attention")
    n_, back_norm = norm_vjp(x, p.norm)
    t = _partition(n_, win)
    att, back_att = mhsa_vjp(t, t, p.mhsa, trace)
    y = _unpartition(att, x.shape, win) + x

    def backward(dy):
        dq, dkv = back_att(_partition(dy, win))
        return dy + back_norm(_unpartition(dq + dkv, x.shape, win))

    return y, backward


def mhsa_block_vjp(x, p: AttentionParams, trace: Optional[Trace] = None):
    """Pre-norm residual attention over every position (no reduction)."""
    h, w = x.shape[2:]
    n_, back_norm = norm_vjp(x, p.norm)
    att, back_att = _self_tokens(n_, p.mhsa, trace)
    y = _from_tokens(att, h, w) + x
    return y, lambda dy: dy + back_norm(back_att(dy))


_DISPATCH = {"saa": saa_vjp, "sra": sra_vjp, "window": window_vjp, "mhsa": mhsa_block_vjp}


def attention_vjp(x, p: AttentionParams, trace: Optional[Trace] = None):
    if p.norm.gamma.shape[0] != x.shape[1]:
        raise DimensionError(f"{p.kind}: input channels (axis 1) {x.shape[1]} != {p.norm.gamma.shape[0]}")
    return _DISPATCH[p.kind](x, p, trace)


def attention_forward(x, p: AttentionParams, trace=None):
    return attention_vjp(x, p, trace)[0]


def saa_forward(x, p, trace=None):
    return saa_vjp(x, p, trace)[0]


def sra_forward(x, p, trace=None):
    return sra_vjp(x, p, trace)[0]


def window_attn_forward(x, p, trace=None):
    return window_vjp(x, p, trace)[0]


def mhsa_block_forward(x, p, trace=None):
    return mhsa_block_vjp(x, p, trace)[0]
