"""Training throughput against the number of domains.

Every (method, N) cell trains a fresh model on the same fixed-shape synthetic
batches, so N is the only thing that changes. Throughput counts target-side
words (pad excluded) per second of wall clock.
"""

from __future__ import annotations

import copy
import csv
import io
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import RunConfig
from .corpus import Batch, make_batch
from .nets import UNK
from .train import Trainer


@dataclass
class BenchRow:
    method: str
    n_domains: int
    words_per_sec: float
    forwards_per_step: float
    step_seconds: float
    words_per_batch: int


def fixed_batches(config: RunConfig, n: int, src_len: int = 8, tgt_len: int = 8, seed: int = 0) -> list[Batch]:
    """``n`` random batches with every sentence exactly ``src_len`` / ``tgt_len`` long."""
    rng = np.random.default_rng([seed, 404])
    V = config.model.tgt_vocab_size
    lo = UNK + 1
    out = []
    for _ in range(n):
        src = rng.integers(lo, V, size=(config.batch_size, src_len))
        tgt = rng.integers(lo, V, size=(config.batch_size, tgt_len))
        out.append(make_batch(src.tolist(), tgt.tolist()))
    return out


def bench_cell(config: RunConfig, method: str, n_domains: int, warmup: int, steps: int,
               batches: Sequence[Batch]) -> BenchRow:
    cfg = copy.deepcopy(config)
    cfg.method = method
    cfg.target_encoder_input = "target"
    cfg.model.n_domains = n_domains
    trainer = Trainer(cfg, [])
    for i in range(warmup):
        trainer.train_step(batches[i % len(batches)])
    times = []
    before = trainer.model.decoder_forwards
    for i in range(steps):
        b = batches[(warmup + i) % len(batches)]
        t0 = time.perf_counter()
        trainer.train_step(b)
        times.append(time.perf_counter() - t0)
    fwd = (trainer.model.decoder_forwards - before) / steps
    words = batches[0].n_target_tokens - batches[0].size  # eos is not a word
    med = statistics.median(times)
    return BenchRow(method, n_domains, words / med, fwd, med, words)


def cmd_bench_speed(config: RunConfig, domain_counts: Sequence[int], methods: Sequence[str] = ("target_encoder", "moe"),
                    warmup: int = 3, steps: int = 10) -> list[BenchRow]:
    batches = fixed_batches(config, 4)
    return [bench_cell(config, m, n, warmup, steps, batches) for m in methods for n in domain_counts]


def rows_to_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_domains", "words_per_sec", "decoder_forwards_per_step", "median_step_seconds"])
    for r in rows:
        w.writerow([r.method, r.n_domains, f"{r.words_per_sec:.1f}", f"{r.forwards_per_step:g}", f"{r.step_seconds:.5f}"])
    return buf.getvalue()

