"""Analytic multiply-accumulate counts.

Convention: 1 FLOP = 1 multiply-accumulate.  Convolutions count
N*Cout*Hout*Wout*(Cin/groups)*kh*kw, transposed convolutions count per input
element (N*Cin*H*W*(Cout/groups)*kh*kw), linear maps rows*Cin*Cout, and
attention adds Lq*Lk*C for the scores and again for the aggregation.
Normalisation, activations, softmax and pooling are tallied separately as
elementwise work and excluded from the MAC total.
"""
from __future__ import annotations

import json
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

from ..attention import AttentionParams
from ..blocks import ConvStemParams, FdParams, FfnVariantParams, LfeParams, PatchEmbedParams
from ..errors import ConfigError, DimensionError
from ..model import PATCHIFY, ModelConfig, ModelParams, stage_geometry

HEADER = "FLOPs reported as multiply-accumulates (1 FLOP = 1 MAC)"


@dataclass
class FlopReport:
    entries: list = field(default_factory=list)  # (name, kind, macs)
    elementwise: Counter = field(default_factory=Counter)
    config: dict = field(default_factory=dict)

    def add(self, name, kind, macs):
        self.entries.append((name, kind, int(macs)))

    def elem(self, kind, n):
        self.elementwise[kind] += int(n)

    def merge(self, other: "FlopReport", prefix=""):
        for name, kind, macs in other.entries:
            self.add(prefix + name, kind, macs)
        self.elementwise.update(other.elementwise)
        return self

    @property
    def total(self) -> int:
        return sum(m for _, _, m in self.entries)

    def by_kind(self) -> dict:
        out = Counter()
        for _, kind, m in self.entries:
            out[kind] += m
        return dict(out)

    def grouped(self, depth=1) -> "OrderedDict[str, int]":
        out = OrderedDict()
        for name, _, m in self.entries:
            key = ".".join(name.split(".")[:depth])
            out[key] = out.get(key, 0) + m
        return out

    def to_dict(self) -> dict:
        return {"convention": HEADER, "total_macs": self.total, "by_kind": self.by_kind(),
                "groups": dict(self.grouped(2)), "elementwise": dict(self.elementwise),
                "config": self.config,
                "entries": [{"name": n, "kind": k, "macs": m} for n, k, m in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


# -- primitives ------------------------------------------------------------------

def conv_out(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


def conv_macs(n, cin, cout, h, w, k, stride=1, pad=0, groups=1):
    ho, wo = conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} does not fit {h}x{w} with pad {pad}")
    return n * cout * ho * wo * (cin // groups) * k * k, ho, wo


def deconv_macs(n, cin, cout, h, w, k, groups=1):
    return n * cin * h * w * (cout // groups) * k * k


def linear_macs(rows, cin, cout):
    return rows * cin * cout


def attention_core(n, lq, lk, c, heads) -> FlopReport:
    r = FlopReport()
    r.add("q", "linear", linear_macs(n * lq, c, c))
    r.add("k", "linear", linear_macs(n * lk, c, c))
    r.add("v", "linear", linear_macs(n * lk, c, c))
    r.add("scores", "attn", n * lq * lk * c)
    r.add("aggregate", "attn", n * lq * lk * c)
    r.add("o", "linear", linear_macs(n * lq, c, c))
    r.elem("softmax", n * heads * lq * lk)
    return r


# -- blocks ------------------------------------------------------------------------

def attention_flops(kind, n, c, h, w, heads, sr=1, win=7) -> FlopReport:
    r = FlopReport(config={"module": kind, "n": n, "c": c, "h": h, "w": w, "heads": heads,
                           "sr": sr, "win": win})
    r.elem("norm", n * c * h * w)
    if kind == "saa":
        if h % sr or w % sr:
            raise DimensionError(f"saa: {h}x{w} not divisible by sr={sr}")
        hp, wp = h // sr, w // sr
        if sr > 1:
            r.elem("pool", n * c * h * w)
        r.merge(attention_core(n, hp * wp, hp * wp, c, heads), "attn.")
        if sr > 1:
            r.add("deconv", "deconv", deconv_macs(n, c, c, hp, wp, sr, groups=c))
    elif kind == "sra":
        if h % sr or w % sr:
            raise DimensionError(f"sra: {h}x{w} not divisible by sr={sr}")
        if sr > 1:
            r.elem("pool", n * c * h * w)
        r.merge(attention_core(n, h * w, (h // sr) * (w // sr), c, heads), "attn.")
    elif kind == "window":
        if h % win or w % win:
            raise DimensionError(f"window: {h}x{w} not divisible by window {win}")
        r.merge(attention_core(n * (h // win) * (w // win), win * win, win * win, c, heads), "attn.")
    elif kind == "mhsa":
        r.merge(attention_core(n, h * w, h * w, c, heads), "attn.")
    else:
        raise ConfigError(f"unknown attention kind {kind!r}")
    return r


def lfe_flops(n, c, h, w) -> FlopReport:
    r = FlopReport()
    r.add("dw", "conv", conv_macs(n, c, c, h, w, 3, 1, 1, c)[0])
    r.elem("act", n * c * h * w)
    return r


def fd_flops(n, c, h, w) -> FlopReport:
    r = FlopReport()
    r.add("conv", "conv", conv_macs(n, c, c, h, w, 3, 1, 1, c)[0])
    return r


def ffn_flops(variant, n, c, h, w, hidden) -> FlopReport:
    r = FlopReport()
    r.elem("norm", n * c * h * w)
    if variant == "ffn":
        r.add("expand", "linear", linear_macs(n * h * w, c, hidden))
        r.add("project", "linear", linear_macs(n * h * w, hidden, c))
    else:
        r.add("expand", "conv", conv_macs(n, c, hidden, h, w, 1)[0])
        r.add("dw", "conv", conv_macs(n, hidden, hidden, h, w, 3, 1, 1, hidden)[0])
        if variant == "ciffn":
            r.merge(fd_flops(n, hidden, h, w), "fd.")
        r.add("project", "conv", conv_macs(n, hidden, c, h, w, 1)[0])
    r.elem("act", n * hidden * h * w)
    return r


def stem_flops(n, cin, c1, h, w) -> FlopReport:
    r = FlopReport()
    m, h, w = conv_macs(n, cin, c1, h, w, 3, 2, 1)
    r.add("conv0", "conv", m)
    for i in (1, 2):
        r.add(f"conv{i}", "conv", conv_macs(n, c1, c1, h, w, 3, 1, 1)[0])
    r.elem("norm", 3 * n * c1 * h * w)
    r.elem("act", 3 * n * c1 * h * w)
    return r


def embed_flops(n, cin, cout, h, w, k=3, stride=2, pad=1) -> FlopReport:
    r = FlopReport()
    m, ho, wo = conv_macs(n, cin, cout, h, w, k, stride, pad)
    r.add("conv", "conv", m)
    r.elem("norm", n * cout * ho * wo)
    return r


def model_flops(cfg: ModelConfig, n=1, h=224, w=224) -> FlopReport:
    geo = stage_geometry(cfg, h, w)
    t = cfg.toggles
    r = FlopReport(config={"model": cfg.name, "input": [n, cfg.in_channels, h, w],
                           "expansion_ratio": cfg.expansion_ratio, "toggles": vars(t).copy()})
    if t.use_stem:
        r.merge(stem_flops(n, cfg.in_channels, cfg.stem_channels, h, w), "stem.")
        cin, h, w = geo.pop(0)
    else:
        cin = cfg.in_channels
    for i, (s, (c, ho, wo)) in enumerate(zip(cfg.stages, geo)):
        pre = f"stage{i + 1}."
        if i == 0 and not t.use_stem:
            r.merge(embed_flops(n, cin, c, h, w, PATCHIFY, PATCHIFY, 0), pre + "embed.")
        else:
            r.merge(embed_flops(n, cin, c, h, w), pre + "embed.")
        hidden = int(round(cfg.expansion_ratio * c))
        for j in range(s.depth):
            bp = f"{pre}block{j + 1}."
            if t.use_lfe:
                r.merge(lfe_flops(n, c, ho, wo), bp + "lfe.")
            r.merge(attention_flops(t.attn, n, c, ho, wo, s.heads, s.sr), bp + "attn.")
            r.merge(ffn_flops(t.ffn, n, c, ho, wo, hidden), bp + "ffn.")
        cin, h, w = c, ho, wo
    r.elem("norm", n * cin * h * w)
    r.elem("pool", n * cin * h * w)
    r.add("head.fc", "linear", linear_macs(n, cin, cfg.num_classes))
    return r


def count_flops(target, input_shape) -> FlopReport:
    """Dispatch on a config or parameter bundle; ``input_shape`` is NCHW."""
    if len(input_shape) != 4:
        raise DimensionError(f"input shape must be NCHW, got {tuple(input_shape)}")
    n, c, h, w = input_shape
    if isinstance(target, ModelParams):
        target = target.config
    if isinstance(target, ModelConfig):
        if c != target.in_channels:
            raise DimensionError(f"model expects {target.in_channels} input channels, got {c}")
        return model_flops(target, n, h, w)
    if isinstance(target, AttentionParams):
        _channels(target.norm.gamma.shape[0], c)
        return attention_flops(target.kind, n, c, h, w, target.mhsa.heads, target.sr, target.win or 7)
    if isinstance(target, FfnVariantParams):
        _channels(target.norm.gamma.shape[0], c)
        return ffn_flops(target.variant, n, c, h, w, target.hidden)
    if isinstance(target, LfeParams):
        _channels(target.dw.w.shape[0], c)
        return lfe_flops(n, c, h, w)
    if isinstance(target, FdParams):
        _channels(target.y_c.shape[0], c)
        return fd_flops(n, c, h, w)
    if isinstance(target, ConvStemParams):
        return stem_flops(n, c, target.conv0.w.shape[0], h, w)
    if isinstance(target, PatchEmbedParams):
        k, s, p = target.conv.w.shape[2], target.conv.stride, target.conv.pad
        return embed_flops(n, c, target.conv.w.shape[0], h, w, k, s, p)
    raise ConfigError(f"no FLOP model for {type(target).__name__}")


def _channels(expected, got):
    if expected != got:
        raise DimensionError(f"input channels {got} != module channels {expected}")
