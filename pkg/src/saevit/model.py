"""SAEViT assembly: configs, initialisation, forward/backward, training smoke loop."""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .attention import ATTENTION_KINDS, AttentionParams, Trace, attention_vjp, init_attention
from .blocks import (FFN_VARIANTS, ConvStemParams, Dense, FfnVariantParams, LfeParams, Norm,
                     PatchEmbedParams, chain, conv_stem_vjp, conv_vjp, dense_vjp, ffn_vjp, init_conv, init_conv_stem,
                     init_dense, init_ffn, init_lfe, init_norm, init_patch_embed, lfe_vjp, norm_vjp,
                     patch_embed_vjp)
from .errors import ConfigError, DimensionError, StateError, TrainingError
from .tensor import ParamTree, RngState, Tensor

PATCHIFY = 4  # patch size of the stem-less embedding
# r=4 leaves xs at 1.087 GMACs; 33/8 keeps every hidden width integral and
# lands both variants inside their parameter and MAC budgets.
CALIBRATED_RATIO = 4.125


@dataclass
class StageConfig:
    channels: int
    heads: int
    sr: int
    depth: int
    size: Optional[int] = None  # documentation only: nominal side at 224 input


@dataclass
class Toggles:
    use_stem: bool = True
    use_lfe: bool = True
    attn: str = "saa"
    ffn: str = "ciffn"


@dataclass
class ModelConfig:
    name: str
    stem_channels: int
    stages: list
    expansion_ratio: float = 4.0
    num_classes: int = 1000
    toggles: Toggles = field(default_factory=Toggles)
    in_channels: int = 3

    def validate(self):
        if not 1 <= len(self.stages) <= 4:
            raise ConfigError(f"{self.name}: expected 1-4 transformer stages, got {len(self.stages)}")
        if self.name in VARIANTS and len(self.stages) != 4:
            raise ConfigError(f"{self.name}: named variants have exactly 4 stages")
        t = self.toggles
        if t.attn not in ("saa", "sra"):
            raise ConfigError(f"toggles.attn must be 'saa' or 'sra', got {t.attn!r}")
        if t.ffn not in FFN_VARIANTS:
            raise ConfigError(f"toggles.ffn must be one of {FFN_VARIANTS}, got {t.ffn!r}")
        if self.expansion_ratio <= 0 or self.num_classes < 1 or self.stem_channels < 1:
            raise ConfigError("expansion_ratio, num_classes and stem_channels must be positive")
        for i, s in enumerate(self.stages):
            if s.heads < 1 or s.channels % s.heads:
                raise ConfigError(f"stage {i + 1}: channels {s.channels} not divisible by heads {s.heads}")
            if s.sr < 1 or s.depth < 1:
                raise ConfigError(f"stage {i + 1}: sr and depth must be positive")
        return self

    def with_toggles(self, **kw) -> "ModelConfig":
        t = Toggles(**{**asdict(self.toggles), **kw})
        return ModelConfig(self.name, self.stem_channels, list(self.stages), self.expansion_ratio,
                           self.num_classes, t, self.in_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [{k: v for k, v in s.items() if k != "size"} for s in d["stages"]]
        return d


_CHANNELS = (48, 96, 192, 384)
_HEADS = (2, 4, 8, 16)
_SR = (8, 4, 2, 1)
_SIDES = (56, 28, 14, 7)
_DEPTHS = {"t": (1, 1, 3, 2), "xs": (1, 2, 5, 3)}
VARIANTS = tuple(_DEPTHS)


def variant_config(name: str, **overrides) -> ModelConfig:
    if name not in _DEPTHS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    stages = [StageConfig(c, h, sr, n, side)
              for c, h, sr, n, side in zip(_CHANNELS, _HEADS, _SR, _DEPTHS[name], _SIDES)]
    toggles = overrides.pop("toggles", None) or Toggles()
    overrides.setdefault("expansion_ratio", CALIBRATED_RATIO)
    return ModelConfig(name, 24, stages, toggles=toggles, **overrides).validate()


def tiny_config(**toggles) -> ModelConfig:
    """32x32 input, channels 16/32/64/128; used by the training smoke test."""
    stages = [StageConfig(16, 1, 4, 1), StageConfig(32, 2, 2, 1),
              StageConfig(64, 4, 1, 1), StageConfig(128, 8, 1, 1)]
    return ModelConfig("tiny", 8, stages, expansion_ratio=2.0, num_classes=4,
                       toggles=Toggles(**toggles)).validate()


def gradcheck_config() -> ModelConfig:
    """One stage, one block, C=16; fed 16x16 images so the stage sees an 8x8 stem map."""
    return ModelConfig("gradcheck", 8, [StageConfig(16, 2, 2, 1)], expansion_ratio=2.0,
                       num_classes=5).validate()


_REQUIRED = ("stem_channels", "expansion_ratio", "num_classes")
_STAGE_KEYS = ("channels", "heads", "sr", "depth")


def config_from_dict(d: dict) -> ModelConfig:
    """Parse the JSON config schema; missing keys raise ConfigError naming the key."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    toggles_d = d.get("toggles", {}) or {}
    unknown = set(toggles_d) - set(Toggles.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown toggle key(s): {sorted(unknown)}")
    toggles = Toggles(**toggles_d)
    if "variant" in d:
        extra = {k: d[k] for k in ("expansion_ratio", "num_classes") if k in d}
        cfg = variant_config(d["variant"], toggles=toggles, **extra)
        if "stem_channels" in d:
            cfg.stem_channels = int(d["stem_channels"])
        return cfg.validate()
    if "stages" not in d:
        raise ConfigError("missing key 'variant' or 'stages'")
    for k in _REQUIRED:
        if k not in d:
            raise ConfigError(f"missing key {k!r}")
    stages = []
    for i, s in enumerate(d["stages"]):
        for k in _STAGE_KEYS:
            if k not in s:
                raise ConfigError(f"missing key {k!r} in stages[{i}]")
        stages.append(StageConfig(*(int(s[k]) for k in _STAGE_KEYS)))
    return ModelConfig(d.get("name", "custom"), int(d["stem_channels"]), stages,
                       float(d["expansion_ratio"]), int(d["num_classes"]), toggles).validate()


def load_config(path) -> ModelConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    return config_from_dict(data)


# -- parameters ------------------------------------------------------------------

@dataclass
class SaeBlock(ParamTree):
    lfe: Optional[LfeParams]
    attn: AttentionParams
    ffn: FfnVariantParams


@dataclass
class StageParams(ParamTree):
    embed: PatchEmbedParams
    blocks: list


@dataclass
class HeadParams(ParamTree):
    norm: Norm
    fc: Dense


@dataclass
class ModelParams(ParamTree):
    stem: Optional[ConvStemParams]
    stages: list
    head: HeadParams
    config: ModelConfig = None


def stage_geometry(cfg: ModelConfig, h: int, w: int) -> list:
    """(channels, height, width) after the stem and after every stage.

    Raises DimensionError naming the first stage whose map cannot be halved
    or is not divisible by its reduction rate.
    """
    out = []
    if cfg.toggles.use_stem:
        if h % 2 or w % 2:
            raise DimensionError(f"stem: input {h}x{w} must have even sides")
        h, w = h // 2, w // 2
        out.append((cfg.stem_channels, h, w))
    for i, s in enumerate(cfg.stages):
        f = PATCHIFY if (i == 0 and not cfg.toggles.use_stem) else 2
        if h % f or w % f:
            raise DimensionError(f"stage {i + 1}: map {h}x{w} cannot be downsampled by {f}")
        h, w = h // f, w // f
        if h % s.sr or w % s.sr:
            raise DimensionError(f"stage {i + 1}: map {h}x{w} not divisible by sr={s.sr}")
        out.append((s.channels, h, w))
    return out


def build_model(cfg: ModelConfig, rng: Optional[RngState] = None, dtype=np.float32) -> ModelParams:
    cfg.validate()
    rng = rng or RngState(42)
    t = cfg.toggles
    stem = init_conv_stem(rng, cfg.stem_channels, cfg.in_channels, dtype) if t.use_stem else None
    cin = cfg.stem_channels if t.use_stem else cfg.in_channels
    stages = []
    for i, s in enumerate(cfg.stages):
        if i == 0 and not t.use_stem:
            embed = PatchEmbedParams(init_conv(rng, cin, s.channels, PATCHIFY, stride=PATCHIFY, dtype=dtype),
                                     init_norm(s.channels, dtype))
        else:
            embed = init_patch_embed(rng, cin, s.channels, dtype)
        blocks = [SaeBlock(init_lfe(rng, s.channels, dtype) if t.use_lfe else None,
                           init_attention(rng, s.channels, s.heads, t.attn, s.sr, dtype=dtype),
                           init_ffn(rng, s.channels, t.ffn, cfg.expansion_ratio, dtype))
                  for _ in range(s.depth)]
        stages.append(StageParams(embed, blocks))
        cin = s.channels
    head = HeadParams(init_norm(cin, dtype), init_dense(rng, cin, cfg.num_classes, dtype))
    return ModelParams(stem, stages, head, cfg)


def _embed_vjp(x, p: PatchEmbedParams):
    if p.conv.stride == 2:
        return patch_embed_vjp(x, p)
    return chain(x, (conv_vjp, p.conv), (norm_vjp, p.norm))


def model_vjp(x, p: ModelParams, cfg: Optional[ModelConfig] = None, trace: Optional[Trace] = None,
              capture: Optional[dict] = None):
    """Logits (N, K) and a backward mapping dlogits -> dx.

    ``capture`` (a dict) receives the output map of the stem under key 0 and
    of transformer stage ``i`` under key ``i``.
    """
    cfg = cfg or p.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"model input must be (N,{cfg.in_channels},H,W), got {x.shape}")
    stage_geometry(cfg, *x.shape[2:])
    backs = []
    h = x
    if p.stem is not None:
        h, b = conv_stem_vjp(h, p.stem)
        backs.append(b)
        if capture is not None:
            capture[0] = h
    for i, st in enumerate(p.stages):
        h, b = _embed_vjp(h, st.embed)
        backs.append(b)
        for blk in st.blocks:
            if blk.lfe is not None:
                h, b = lfe_vjp(h, blk.lfe)
                backs.append(b)
            h, b = attention_vjp(h, blk.attn, trace)
            backs.append(b)
            h, b = ffn_vjp(h, blk.ffn)
            backs.append(b)
        if capture is not None:
            capture[i + 1] = h
    hn, back_norm = norm_vjp(h, p.head.norm)
    n, c, hh, ww = hn.shape
    ops._count_elementwise("pool", hn.size)
    pooled = hn.mean(axis=(2, 3))
    logits, back_fc = dense_vjp(pooled, p.head.fc)

    def backward(dlogits):
        dpooled = back_fc(dlogits)
        dh = np.broadcast_to(dpooled[:, :, None, None] / (hh * ww), hn.shape)
        dh = back_norm(np.ascontiguousarray(dh))
        for b in reversed(backs):
            dh = b(dh)
        return dh

    return logits, backward


def model_forward(x, p: ModelParams, cfg: Optional[ModelConfig] = None, trace=None, capture=None):
    return model_vjp(x, p, cfg, trace, capture)[0]


def loss_and_grad(x, labels, p: ModelParams) -> float:
    """Cross-entropy loss; parameter gradients are accumulated into ``p``."""
    logits, back = model_vjp(x, p)
    loss, dlogits = ops.cross_entropy(logits, labels)
    back(dlogits)
    return loss


# -- parameter accounting -----------------------------------------------------------

@dataclass
class ParamCount:
    total: int
    by_module: "OrderedDict[str, int]"
    by_kind: "OrderedDict[str, int]"


def _kind(name: str) -> str:
    parts = name.split(".")
    if parts[0] in ("stem", "head"):
        return parts[0]
    if parts[2] == "embed":
        return "embed"
    return parts[4]  # stages.i.blocks.j.<lfe|attn|ffn>


def _module(name: str) -> str:
    parts = name.split(".")
    if parts[0] in ("stem", "head"):
        return parts[0]
    if parts[2] == "embed":
        return f"stage{int(parts[1]) + 1}.embed"
    return f"stage{int(parts[1]) + 1}.block{int(parts[3]) + 1}.{parts[4]}"


def count_params(p: ParamTree) -> ParamCount:
    by_module, by_kind = OrderedDict(), OrderedDict()
    total = 0
    for name, t in p.named_parameters():
        total += t.size
        if isinstance(p, ModelParams):
            by_module[_module(name)] = by_module.get(_module(name), 0) + t.size
            by_kind[_kind(name)] = by_kind.get(_kind(name), 0) + t.size
        else:
            top = name.split(".")[0]
            by_module[top] = by_module.get(top, 0) + t.size
    return ParamCount(total, by_module, by_kind if by_kind else OrderedDict(by_module))


# -- optimisation -------------------------------------------------------------------

def sgd_step(p: ParamTree, lr: float, momentum: float = 0.0, buffers: Optional[dict] = None) -> ParamTree:
    """Momentum SGD (v <- m*v + g; w <- w - lr*v) applied in place.

    ``buffers`` maps parameter names to momentum buffers and persists across
    calls when the caller keeps it.
    """
    named = list(p.named_parameters())
    missing = [n for n, t in named if t.grad is None]
    if missing:
        raise StateError(f"sgd_step: no gradient for {len(missing)} tensor(s), e.g. {missing[0]}")
    buffers = {} if buffers is None else buffers
    for name, t in named:
        g = t.grad
        if momentum:
            v = buffers.get(name)
            v = g.copy() if v is None else momentum * v + g
            buffers[name] = v
            g = v
        t.data -= (lr * g).astype(t.dtype)
    return p


def synthetic_dataset(n=32, classes=4, shape=(3, 32, 32), rng: Optional[RngState] = None,
                      separation=1.0, dtype=np.float32):
    """Gaussian noise around one random mean image per class; balanced labels."""
    rng = rng or RngState(42)
    g = rng.generator
    means = g.standard_normal((classes,) + tuple(shape)) * separation
    labels = g.permutation(np.arange(n) % classes)
    x = means[labels] + g.standard_normal((n,) + tuple(shape))
    return x.astype(dtype), labels


def train_smoke(cfg: Optional[ModelConfig] = None, steps=300, lr=0.05, momentum=0.9, seed=42,
                n=32, input_size=32, callback=None):
    """Overfit a synthetic set with full-batch momentum SGD; returns (losses, params)."""
    cfg = cfg or tiny_config()
    rng = RngState(seed)
    p = build_model(cfg, rng)
    x, labels = synthetic_dataset(n, cfg.num_classes, (cfg.in_channels, input_size, input_size), rng)
    buffers = {}
    losses = []
    for step in range(steps):
        p.zero_grad()
        loss = loss_and_grad(x, labels, p)
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged to {loss} at step {step}", step=step)
        losses.append(loss)
        sgd_step(p, lr, momentum, buffers)
        if callback is not None:
            callback(step, loss)
    return losses, p
