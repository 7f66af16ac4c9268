"""Desk-scale diversity experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import DataConfig, DecodingConfig, OptimConfig, RunConfig, ScheduleConfig
from .corpus import Corpus, SynthSpec, source_batch
from .decoding import generate_all_domains, generate_baseline, strip_hyps
from .metrics import mbleu, pairwise_bleu
from .nets import ModelConfig
from .train import TrainResult, run_training

DESK_STEPS = 8000


def desk_config(method: str = "target_encoder", seed: int = 0, steps: int = DESK_STEPS, **over) -> RunConfig:
    """The desk-scale setting: K=4 synthetic task, d=64 / 2 layers / 2 heads, N=4.

    ``over`` may set top-level RunConfig fields (e.g. ``lam``,
    ``target_encoder_input``).
    """
    cfg = RunConfig(
        model=ModelConfig(d_model=64, n_layers=2, n_heads=2, d_ff=128, n_domains=4, dropout_enc_dec=0.1, seed=seed),
        method=method,
        schedule=ScheduleConfig(p_hard=0.25),
        optimizer=OptimConfig(lr_peak=1e-3, warmup=max(1, steps // 8)),
        data=DataConfig(synth=SynthSpec(vocab_size=20, n_modes=4, min_len=5, max_len=10, n_train=5000, seed=0)),
        decoding=DecodingConfig(mode="greedy" if method != "vanilla" else "beam", beam_size=1 if method != "vanilla" else 4),
        steps=steps,
        batch_size=32,
        valid_every=steps,
        log_every=100,
        seed=seed,
        output_dir=f"runs/desk-{method}-{seed}",
    )
    for k, v in over.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


@dataclass
class DiversityReport:
    method: str
    usage_entropy: float | None
    usage_histogram: list[float] | None
    mbleu: float
    pairwise_bleu: float
    mean_distinct: float
    mode_recovery: float
    train_seconds: float
    final_nll: float
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        ent = "n/a" if self.usage_entropy is None else f"{self.usage_entropy:.3f}"
        return (f"{self.method}: usage_entropy={ent} mBLEU={self.mbleu:.2f} pairwise={self.pairwise_bleu:.2f} "
                f"distinct={self.mean_distinct:.3f} recovery={self.mode_recovery:.3f} nll={self.final_nll:.4f} "
                f"train_s={self.train_seconds:.0f}")


def diversity_stats(hyp_sets, refs) -> dict:
    distinct = float(np.mean([len({tuple(h) for h in hs}) for hs in hyp_sets]))
    recovery = float(np.mean([all(list(h) in [list(r) for r in rs] for h in hs) for hs, rs in zip(hyp_sets, refs)]))
    return {
        "mbleu": mbleu(hyp_sets, refs).score,
        "pairwise_bleu": pairwise_bleu(hyp_sets).score,
        "mean_distinct": distinct,
        "mode_recovery": recovery,
    }


def evaluate_run(res: TrainResult, beam_size: int = 4, max_len: int = 32) -> DiversityReport:
    """Decode the test split: one greedy hypothesis per domain, or the full beam for vanilla."""
    cfg = res.trainer.config
    corpus: Corpus = res.data.corpus
    model = res.model
    src = source_batch([e.src for e in corpus.test])
    refs = [e.refs for e in corpus.test]
    if cfg.method == "vanilla":
        sets = generate_baseline(model, src, beam_size, "beam", max_len=max_len)
        usage = None
    else:
        sets = generate_all_domains(model, src, "greedy", max_len=max_len)
        usage = res.trainer.usage()
    stats = diversity_stats(strip_hyps(sets), refs)
    tail = [r.nll for r in res.reports[-50:]]
    return DiversityReport(
        cfg.method, None if usage is None else usage.entropy, None if usage is None else usage.histogram,
        stats["mbleu"], stats["pairwise_bleu"], stats["mean_distinct"], stats["mode_recovery"],
        float("nan"),
        float(np.mean(tail)) if tail else float("nan"),
    )


def run_desk(config: RunConfig, progress=None) -> tuple[TrainResult, DiversityReport]:
    t0 = time.perf_counter()
    res = run_training(config, write=False, progress=progress)
    seconds = time.perf_counter() - t0
    report = evaluate_run(res)
    report.train_seconds = seconds
    return res, report


def collapsed(entropy: float, n_domains: int) -> bool:
    return entropy < 0.1 * math.log(n_domains)


def usage_of(res: TrainResult) -> float:
    """Domain-usage entropy of the argmax assignment on the validation split."""
    u = res.trainer.usage()
    return float("nan") if u is None else u.entropy


