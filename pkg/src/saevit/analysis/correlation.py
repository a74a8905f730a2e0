"""Channel-redundancy statistics on captured activations."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ConfigError, DimensionError
from ..model import ModelParams, model_forward
from ..tensor import RngState

HIST_BINS = 20


@dataclass
class CorrReport:
    channels: np.ndarray          # sampled channel indices
    matrix: np.ndarray            # k x k Pearson correlations
    abs_mean: float               # mean |r| over off-diagonal pairs
    std: float                    # std of r over off-diagonal pairs
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    zero_variance: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.channels)

    def stats(self) -> dict:
        return {"abs_mean": self.abs_mean, "std": self.std, "k": self.k,
                "channels": [int(c) for c in self.channels],
                "zero_variance_channels": [int(c) for c in self.zero_variance], **self.meta}

    def matrix_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel"] + [int(c) for c in self.channels])
        for c, row in zip(self.channels, self.matrix):
            w.writerow([int(c)] + [f"{v:.10f}" for v in row])
        return buf.getvalue()

    def hist_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, n in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts):
            w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(n)])
        return buf.getvalue()

    def write(self, directory):
        from pathlib import Path
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "matrix.csv").write_text(self.matrix_csv())
        (d / "hist.csv").write_text(self.hist_csv())
        (d / "stats.json").write_text(json.dumps(self.stats(), indent=1, sort_keys=True) + "\n")
        return d


def pearson_matrix(rows: np.ndarray):
    """Population Pearson correlation between the rows of a (k, M) array.

    Returns the matrix and the indices of zero-variance rows, whose
    correlations are defined as 0 (diagonal kept at 1).
    """
    x = np.asarray(rows, dtype=np.float64)
    xc = x - x.mean(axis=1, keepdims=True)
    sd = np.sqrt((xc * xc).mean(axis=1))
    dead = np.flatnonzero(sd <= 1e-12 * (1.0 + np.abs(x).max(axis=1)))
    sd_safe = sd.copy()
    sd_safe[dead] = 1.0
    z = xc / sd_safe[:, None]
    z[dead] = 0.0
    m = (z @ z.T) / x.shape[1]
    m = 0.5 * (m + m.T)
    np.clip(m, -1.0, 1.0, out=m)
    np.fill_diagonal(m, 1.0)
    return m, dead


def channel_correlation(activations: np.ndarray, k: int = 100, rng: Optional[RngState] = None) -> CorrReport:
    if activations.ndim != 4:
        raise DimensionError(f"expected (N,C,H,W) activations, got rank {activations.ndim}")
    n, c, h, w = activations.shape
    if c < 2:
        raise DimensionError(f"need at least 2 channels, got {c}")
    if n * h * w < 2:
        raise DimensionError("need at least 2 observations per channel")
    rng = rng or RngState(42)
    chosen = np.sort(rng.generator.choice(c, size=min(k, c), replace=False))
    rows = activations[:, chosen].transpose(1, 0, 2, 3).reshape(len(chosen), -1)
    m, dead = pearson_matrix(rows)
    off = m[np.triu_indices(len(chosen), k=1)]
    counts, edges = np.histogram(off, bins=HIST_BINS, range=(-1.0, 1.0))
    return CorrReport(chosen, m, float(np.abs(off).mean()), float(off.std()), counts, edges,
                      [int(chosen[i]) for i in dead], {"seed": rng.seed, "observations": int(n * h * w)})


def capture_activations(p: ModelParams, x: np.ndarray, stage: int = 3) -> np.ndarray:
    """Output map of ``stage`` (0 = conv-stem, 1..4 = transformer stages)."""
    lo = 0 if p.stem is not None else 1
    if not lo <= stage <= len(p.stages):
        raise ConfigError(f"stage {stage} out of range [{lo}, {len(p.stages)}]")
    cap = {}
    model_forward(x, p, capture=cap)
    return cap[stage]
