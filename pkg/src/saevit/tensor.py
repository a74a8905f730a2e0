"""Tensor container, seeded RNG, parameter trees and the ``.sat`` file format.

Activations move between ops as plain ``numpy.ndarray`` values in NCHW
layout.  Learnable weights are wrapped in :class:`Tensor` so that backward
passes can accumulate gradients into them in place.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DimensionError, FormatError, StateError

SAT_MAGIC = b"SAT1"
DEFAULT_DTYPE = np.float32


class Tensor:
    """Dense array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class RngState:
    """Seeded counter-based generator (Philox) that can be split into streams."""

    def __init__(self, seed: int = 42):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int = 1) -> list[np.random.Generator]:
        return [np.random.Generator(np.random.Philox(s)) for s in self._seq.spawn(n)]

    def normal(self, shape, std=1.0, dtype=DEFAULT_DTYPE):
        return (self.generator.standard_normal(shape) * std).astype(dtype)

    def trunc_normal(self, shape, std=0.02, bound=2.0, dtype=DEFAULT_DTYPE):
        """Normal samples redrawn until every value lies within ``bound`` std."""
        out = self.generator.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.generator.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype)


class ParamTree:
    """Mixin for dataclasses whose fields hold Tensors, nested trees or lists of them."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            yield from _walk(getattr(self, f.name), prefix + f.name)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def astype(self, dtype):
        """Cast every tensor in place (used to switch into f64 gradcheck mode)."""
        for t in self.parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self


def _walk(value, name):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, ParamTree):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def write_sat(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SAT_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_sat(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != SAT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {SAT_MAGIC!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    head = 8 + 4 * rank
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) - head != 4 * n:
        raise FormatError(f"{path}: payload has {len(raw) - head} bytes, expected {4 * n}")
    return np.frombuffer(raw, dtype="<f4", offset=head).reshape(dims).astype(np.float32)


def save_params(tree: ParamTree, directory) -> Path:
    """Write every tensor as ``<name>.sat`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, t in tree.named_parameters():
        fname = name + ".sat"
        write_sat(directory / fname, t.data)
        manifest[name] = {"file": fname, "shape": list(t.shape)}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return directory


def load_params(tree: ParamTree, directory) -> ParamTree:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    params = dict(tree.named_parameters())
    missing = sorted(set(params) - set(manifest))
    extra = sorted(set(manifest) - set(params))
    if missing or extra:
        raise StateError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for name, t in params.items():
        arr = read_sat(directory / manifest[name]["file"])
        if arr.shape != t.shape:
            raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data = arr.astype(t.dtype)
    return tree


def check_finite(name: str, arr: np.ndarray) -> None:
    if DEBUG and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name}: non-finite output")


DEBUG = bool(os.environ.get("SAEVIT_DEBUG"))
