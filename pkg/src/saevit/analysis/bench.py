"""Wall-clock latency/throughput measurement on CPU."""
from __future__ import annotations

import json
import os
import platform
import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from ..attention import attention_forward, init_attention
from ..errors import ConfigError
from ..tensor import RngState
from .flops import attention_flops

# input geometry used to compare attention modules
PROTOCOL = {"h": 56, "w": 56, "c": 256, "heads": 8}


@dataclass
class BenchReport:
    module: str
    input_shape: list
    warmup_secs: float
    iterations: int
    times: list = field(repr=False)
    batch: int = 1
    threads: int = 1
    macs: int = 0
    environment: str = ""
    warnings: list = field(default_factory=list)

    @property
    def mean_ms(self) -> float:
        return 1e3 * statistics.fmean(self.times)

    @property
    def min_ms(self) -> float:
        return 1e3 * min(self.times)

    @property
    def std_ms(self) -> float:
        return 1e3 * statistics.pstdev(self.times)

    @property
    def throughput(self) -> float:
        """Images per second over the timed iterations."""
        return self.batch * self.iterations / sum(self.times)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean_latency_ms=self.mean_ms, min_latency_ms=self.min_ms, std_latency_ms=self.std_ms,
                 throughput_img_s=self.throughput, flops_convention="1 FLOP = 1 MAC")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self) -> str:
        rows = [("module", self.module), ("input", "x".join(map(str, self.input_shape))),
                ("batch", self.batch), ("threads", self.threads), ("iterations", self.iterations),
                ("warmup (s)", f"{self.warmup_secs:g}"), ("MACs", f"{self.macs:,}"),
                ("mean latency (ms)", f"{self.mean_ms:.3f}"), ("min latency (ms)", f"{self.min_ms:.3f}"),
                ("std latency (ms)", f"{self.std_ms:.3f}"), ("throughput (img/s)", f"{self.throughput:.2f}"),
                ("environment", self.environment)]
        rows += [("warning", w) for w in self.warnings]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def environment_string(threads) -> str:
    blas = ",".join(sorted({i.get("internal_api", "?") for i in threadpool_info()})) or "none"
    return f"{platform.platform()} | {platform.processor() or platform.machine()} | python {platform.python_version()} " \
           f"| numpy {np.__version__} ({blas}) | threads={threads} | cpus={os.cpu_count()}"


@contextmanager
def pinned_threads(threads: int = 1):
    with threadpool_limits(limits=threads):
        yield


def bench_module(name, forward, input_shape, warmup_secs=5.0, iters=50, threads=1, seed=42,
                 macs=0, dtype=np.float32) -> BenchReport:
    """Warm up for ``warmup_secs`` then time ``iters`` forwards on one fixed random input."""
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    x = RngState(seed).normal(tuple(input_shape), dtype=dtype)
    times = []
    with pinned_threads(threads):
        end = time.perf_counter() + warmup_secs
        forward(x)
        while time.perf_counter() < end:
            forward(x)
        for _ in range(iters):
            t0 = time.perf_counter()
            forward(x)
            times.append(time.perf_counter() - t0)
    report = BenchReport(name, list(input_shape), warmup_secs, iters, times, batch=input_shape[0],
                         threads=threads, macs=macs, environment=environment_string(threads))
    res = time.get_clock_info("perf_counter").resolution
    if res > 0.01 * statistics.fmean(times):
        report.warnings.append(f"timer resolution {res:.2e}s exceeds 1% of mean latency")
    return report


def attention_bench(kind, batch=8, h=56, w=56, c=256, heads=8, sr=8, win=7, warmup_secs=5.0,
                    iters=50, threads=1, seed=42) -> BenchReport:
    p = init_attention(RngState(seed), c, heads, kind, sr=sr, win=win)
    macs = attention_flops(kind, batch, c, h, w, heads, p.sr, p.win or win).total
    label = kind if kind in ("mhsa",) else f"{kind}(sr={p.sr})" if kind in ("saa", "sra") else f"window({win})"
    return bench_module(label, lambda x: attention_forward(x, p), (batch, c, h, w), warmup_secs, iters,
                        threads, seed, macs)
