"""Inference timing and peak-memory harness."""
from __future__ import annotations

import statistics
import time
import tracemalloc
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import DTYPE
from .models import ModelParams, lm_forward, resolve_gc, vision_forward


@dataclass
class BenchRow:
    dims: tuple[int, ...]
    seq_len: int
    throughput: float  # tokens/s for LMs, images/s for vision models
    median_seconds: float
    peak_bytes: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


def _runner(params: ModelParams, dims, seq_len: int, batch: int, rng: np.random.Generator):
    cfg = params.config
    if cfg.kind == "lm":
        x = rng.integers(0, cfg.vocab_size, size=(batch, seq_len))
        return (lambda: lm_forward(params, x, dims)), batch * seq_len
    x = rng.standard_normal((batch, cfg.image_size, cfg.image_size, cfg.channels)).astype(DTYPE)
    return (lambda: vision_forward(params, x, dims)), batch


def bench(params: ModelParams, gcs: Sequence, seq_lens: Sequence[int] | None = None, batch: int = 1,
          runs: int = 5, warmup: int = 1, seed: int = 0) -> list[BenchRow]:
    """One row per (gc, seq_len): median forward time over ``runs`` timed calls.

    Vision models have a fixed sequence length (patches + [CLS]); ``seq_lens``
    is ignored for them. Peak memory comes from a separate traced call so the
    tracer does not slow the timed ones.
    """
    cfg = params.config
    if runs < 5:
        raise ValueError("bench needs at least 5 timed runs")
    if cfg.kind != "lm":
        seq_lens = [cfg.n_patches + 1]
    elif not seq_lens:
        raise ValueError("seq_lens required for language models")
    rng = np.random.default_rng(seed)
    rows = []
    with ag.no_grad():
        for gc in gcs:
            dims = tuple(resolve_gc(cfg, gc))
            for sl in seq_lens:
                fn, units = _runner(params, dims, int(sl), batch, rng)
                for _ in range(warmup):
                    fn()
                times = []
                for _ in range(runs):
                    t0 = time.perf_counter()
                    fn()
                    times.append(time.perf_counter() - t0)
                med = statistics.median(times)
                tracemalloc.start()
                try:
                    tracemalloc.reset_peak()
                    base = tracemalloc.get_traced_memory()[0]
                    fn()
                    peak = tracemalloc.get_traced_memory()[1] - base
                finally:
                    tracemalloc.stop()
                rows.append(BenchRow(dims, int(sl), units / med, med, int(peak)))
    return rows
