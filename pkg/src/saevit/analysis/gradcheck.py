"""Central-difference verification of the hand-written backward passes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import ops
from ..attention import init_attention, init_mhsa, attention_vjp, mhsa_vjp
from ..blocks import (conv_stem_vjp, fd_vjp, ffn_vjp, init_conv_stem, init_fd, init_ffn, init_lfe,
                      init_patch_embed, lfe_vjp, patch_embed_vjp)
from ..errors import ConfigError, VerificationError
from ..model import build_model, gradcheck_config, model_vjp
from ..tensor import ParamTree, RngState, Tensor

F64 = np.float64


@dataclass
class GradCheckResult:
    target: str
    errors: dict = field(default_factory=dict)   # tensor name -> relative error
    checked: dict = field(default_factory=dict)  # tensor name -> scalars compared
    threshold: float = 1e-6
    # gradients that vanish identically (e.g. key bias under softmax shift
    # invariance); the relative error is meaningless there, so these hold the
    # absolute error instead
    zero: list = field(default_factory=list)

    @property
    def worst(self):
        if not self.errors:
            return None, 0.0
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return all(e < self.threshold for e in self.errors.values())

    def to_dict(self):
        name, err = self.worst
        return {"target": self.target, "passed": self.passed, "threshold": self.threshold,
                "worst": {"tensor": name, "rel_err": err}, "errors": self.errors,
                "checked": self.checked, "zero_gradient": self.zero}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)


ZERO_TOL = 1e-9


def relative_error(analytic, numeric) -> float:
    """max|a - n| / (max(|a| + |n|) + 1e-12) over the compared scalars."""
    a, n = np.asarray(analytic, F64), np.asarray(numeric, F64)
    return float(np.max(np.abs(a - n)) / (np.max(np.abs(a) + np.abs(n)) + 1e-12))


def _is_zero(analytic, numeric) -> bool:
    return max(np.max(np.abs(analytic)), np.max(np.abs(numeric))) < ZERO_TOL


def _as_params(params):
    if params is None:
        return {}
    if isinstance(params, ParamTree):
        return dict(params.named_parameters())
    return dict(params)


def grad_check(forward: Callable, params=None, inputs=(), eps=1e-5, threshold=1e-6, sample=256,
               full_below=512, seed=0, name="", check_inputs=True) -> GradCheckResult:
    """Compare analytic and central-difference gradients of ``sum(R * forward(*inputs))``.

    ``forward(*inputs)`` returns ``(y, backward)``; ``backward(dy)`` returns the
    input gradient(s) and accumulates parameter gradients into the Tensors in
    ``params``.  ``R`` is a fixed seeded weighting so that no gradient vanishes
    by symmetry.  Tensors with more than ``full_below`` scalars are checked on
    a seeded subsample of ``sample`` scalars.
    """
    tensors = _as_params(params)
    inputs = [np.ascontiguousarray(x) for x in inputs]
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.zero_grad()
    y, backward = forward(*inputs)
    weight = rng.standard_normal(np.shape(y))
    in_grads = backward(weight if np.ndim(y) else F64(weight))
    if not isinstance(in_grads, tuple):
        in_grads = (in_grads,)

    def loss():
        return float(np.sum(weight * forward(*inputs)[0]))

    targets = [(k, t.data, t.grad) for k, t in tensors.items()]
    if check_inputs:
        targets += [(f"input{i}", x, g) for i, (x, g) in enumerate(zip(inputs, in_grads))
                    if g is not None and np.issubdtype(x.dtype, np.floating)]
    result = GradCheckResult(name, threshold=threshold)
    for key, arr, grad in targets:
        if grad is None:
            grad = np.zeros_like(arr)
        if not np.all(np.isfinite(grad)):
            raise VerificationError(f"{name}: non-finite analytic gradient for {key}")
        flat = arr.reshape(-1)
        assert np.shares_memory(flat, arr)
        idx = np.arange(flat.size) if flat.size <= full_below else rng.choice(flat.size, sample, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            up = loss()
            flat[i] = old - eps
            down = loss()
            flat[i] = old
            numeric[j] = (up - down) / (2 * eps)
        if not np.all(np.isfinite(numeric)):
            raise VerificationError(f"{name}: non-finite numeric gradient for {key}")
        a = grad.reshape(-1)[idx]
        if _is_zero(a, numeric):
            result.zero.append(key)
            result.errors[key] = float(np.max(np.abs(a - numeric)))
        else:
            result.errors[key] = relative_error(a, numeric)
        result.checked[key] = len(idx)
    return result


# -- registry of checkable targets ---------------------------------------------------

def _jitter(tree, g, scale=0.1):
    """Move every parameter off its structured init so no gradient is trivially zero."""
    for _, t in _as_params(tree).items():
        t.data += scale * g.standard_normal(t.shape)
    return tree


def _x(g, *shape):
    return g.standard_normal(shape)


def _op_with_params(vjp, names, **kw):
    """Adapt ``ops.<op>_vjp(x, *params)`` so parameter gradients land in Tensors."""
    def make(tensors):
        def forward(x):
            y, back = vjp(x, *(tensors[n].data if n in tensors else None for n in names), **kw)

            def backward(dy):
                dx, *dps = back(dy)
                for n, dp in zip(names, dps):
                    if n in tensors:
                        tensors[n].accumulate(dp)
                return dx

            return y, backward
        return forward
    return make


def _t_conv2d(g):
    p = {"w": Tensor(_x(g, 3, 2, 3, 3)), "b": Tensor(_x(g, 3))}
    return _op_with_params(ops.conv2d_vjp, ("w", "b"), stride=2, pad=1)(p), p, [_x(g, 2, 2, 5, 5)]


def _t_conv2d_grouped(g):
    p = {"w": Tensor(_x(g, 4, 2, 3, 3)), "b": Tensor(_x(g, 4))}
    return _op_with_params(ops.conv2d_vjp, ("w", "b"), stride=1, pad=1, groups=2)(p), p, [_x(g, 2, 4, 4, 4)]


def _t_dwconv(g):
    p = {"w": Tensor(_x(g, 3, 1, 3, 3)), "b": Tensor(_x(g, 3))}
    return _op_with_params(ops.conv2d_vjp, ("w", "b"), pad=1, groups=3)(p), p, [_x(g, 2, 3, 4, 4)]


def _t_tconv(g):
    p = {"w": Tensor(_x(g, 3, 2, 2, 2)), "b": Tensor(_x(g, 2))}
    return _op_with_params(ops.transposed_conv2d_vjp, ("w", "b"), stride=2)(p), p, [_x(g, 1, 3, 3, 3)]


def _t_tconv_dw(g):
    p = {"w": Tensor(_x(g, 4, 1, 2, 2)), "b": Tensor(_x(g, 4))}
    return _op_with_params(ops.transposed_conv2d_vjp, ("w", "b"), stride=2, groups=4)(p), p, [_x(g, 2, 4, 3, 3)]


def _t_pool(g):
    return (lambda x: _single(ops.avg_pool2d_vjp(x, 2))), None, [_x(g, 2, 3, 4, 6)]


def _t_pool_overlap(g):
    return (lambda x: _single(ops.avg_pool2d_vjp(x, 3, 2))), None, [_x(g, 1, 2, 7, 7)]


def _t_layer_norm(g):
    p = {"gamma": Tensor(1 + 0.1 * _x(g, 5)), "beta": Tensor(_x(g, 5))}
    return _op_with_params(ops.layer_norm_vjp, ("gamma", "beta"))(p), p, [_x(g, 2, 5, 3, 3)]


def _t_softmax(g):
    return (lambda x: _single(ops.softmax_vjp(x, axis=-1))), None, [_x(g, 3, 7)]


def _t_gelu(g):
    return (lambda x: _single(ops.gelu_vjp(x))), None, [2 * _x(g, 4, 6)]


def _t_linear(g):
    p = {"w": Tensor(_x(g, 5, 4)), "b": Tensor(_x(g, 4))}
    return _op_with_params(ops.linear_vjp, ("w", "b"))(p), p, [_x(g, 2, 3, 5)]


def _t_cross_entropy(g):
    labels = np.array([0, 3, 1, 2, 3])

    def forward(logits):
        loss, grad = ops.cross_entropy(logits, labels)
        return np.float64(loss), lambda dy: grad * dy

    return forward, None, [_x(g, 5, 4)]


def _single(pair):
    y, back = pair
    return y, lambda dy: back(dy)[0]


def _block(vjp, init, shape, jitter=True):
    def build(g):
        p = init(RngState(int(g.integers(1 << 31))))
        p.astype(F64)
        if jitter:
            _jitter(p, g)
        return (lambda x: vjp(x, p)), p, [_x(g, *shape)]
    return build


def _attn(kind, sr=1, win=0):
    def init(r):
        return init_attention(r, 8, 2, kind, sr=sr, win=win or 7, dtype=F64)
    return _block(attention_vjp, init, (2, 8, 4, 4))


def _t_mhsa(g):
    p = init_mhsa(RngState(int(g.integers(1 << 31))), 8, 2, dtype=F64)
    _jitter(p, g, 0.3)

    def forward(xq, xkv):
        return mhsa_vjp(xq, xkv, p)

    return forward, p, [_x(g, 2, 5, 8), _x(g, 2, 3, 8)]


def _t_model(g):
    cfg = gradcheck_config()
    p = build_model(cfg, RngState(int(g.integers(1 << 31))), dtype=F64)
    _jitter(p, g, 0.05)
    return (lambda x: model_vjp(x, p)), p, [_x(g, 2, 3, 16, 16)]


TARGETS = {
    "conv2d": _t_conv2d,
    "conv2d_grouped": _t_conv2d_grouped,
    "depthwise_conv2d": _t_dwconv,
    "transposed_conv2d": _t_tconv,
    "transposed_conv2d_depthwise": _t_tconv_dw,
    "avg_pool2d": _t_pool,
    "avg_pool2d_overlap": _t_pool_overlap,
    "layer_norm": _t_layer_norm,
    "softmax": _t_softmax,
    "gelu": _t_gelu,
    "linear": _t_linear,
    "cross_entropy": _t_cross_entropy,
    "conv_stem": _block(conv_stem_vjp, lambda r: init_conv_stem(r, 4, dtype=F64), (2, 3, 6, 6)),
    "patch_embed": _block(patch_embed_vjp, lambda r: init_patch_embed(r, 3, 6, dtype=F64), (2, 3, 6, 6)),
    "lfe": _block(lfe_vjp, lambda r: init_lfe(r, 6, dtype=F64), (2, 6, 5, 5)),
    "fd": _block(fd_vjp, lambda r: init_fd(r, 6, dtype=F64), (2, 6, 5, 5)),
    "ffn": _block(ffn_vjp, lambda r: init_ffn(r, 6, "ffn", 2, dtype=F64), (2, 6, 4, 4)),
    "dwsffn": _block(ffn_vjp, lambda r: init_ffn(r, 6, "dwsffn", 2, dtype=F64), (2, 6, 4, 4)),
    "ciffn": _block(ffn_vjp, lambda r: init_ffn(r, 6, "ciffn", 2, dtype=F64), (2, 6, 4, 4)),
    "mhsa": _t_mhsa,
    "mhsa_block": _attn("mhsa"),
    "sra": _attn("sra", sr=2),
    "sra_sr1": _attn("sra", sr=1),
    "saa": _attn("saa", sr=2),
    "saa_sr1": _attn("saa", sr=1),
    "window": _attn("window", win=2),
    "tiny-model": _t_model,
}

THRESHOLDS = {"tiny-model": 1e-5}


def run_target(name: str, seed: int = 0, eps: float = 1e-5) -> GradCheckResult:
    if name not in TARGETS:
        raise ConfigError(f"unknown gradcheck target {name!r}; valid: {', '.join(TARGETS)}")
    g = np.random.default_rng(seed)
    forward, params, inputs = TARGETS[name](g)
    return grad_check(forward, params, inputs, eps=eps, threshold=THRESHOLDS.get(name, 1e-6),
                      seed=seed, name=name)
