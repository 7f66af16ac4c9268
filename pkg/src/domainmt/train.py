"""Training loop shared by the three methods, run directories and run logs."""

from __future__ import annotations

import copy
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import checkpoint_save, from_model
from .config import RunConfig, dump_config
from .corpus import Corpus, Pair, Vocabulary, endless_batches, generate_corpus, make_batch, read_records, write_corpus, write_pairs
from .latent import AnnealSchedule, LossReport, assign_domains, train_step, vanilla_step
from .metrics import UsageStats, domain_usage_stats
from .moe import moe_train_step, score_all_domains
from .nets import Seq2Seq
from .optim import Adam


class RunLockedError(RuntimeError):
    pass


@contextmanager
def run_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{directory} is locked by another process ({lock} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@dataclass
class TaskData:
    vocab: Vocabulary | None
    words: list[str]
    train: list[Pair]
    valid: list[Pair]
    corpus: Corpus | None = None


def _vocab_from_files(paths: Sequence[str]) -> list[str]:
    from .corpus import RESERVED
    seen = set()
    for p in paths:
        for rec in read_records(p):
            seen.update(rec["src"])
            for r in rec["refs"]:
                seen.update(r)
    return list(RESERVED) + sorted(seen - set(RESERVED))


def load_task(config: RunConfig) -> TaskData:
    if config.data.train_path:
        paths = [config.data.train_path] + ([config.data.valid_path] if config.data.valid_path else [])
        words = _vocab_from_files(paths)
        index = {w: i for i, w in enumerate(words)}

        def pairs(path):
            return [Pair([index[t] for t in r["src"]], [index[t] for t in r["refs"][0]]) for r in read_records(path)]

        train = pairs(config.data.train_path)
        valid = pairs(config.data.valid_path) if config.data.valid_path else train[:200]
        return TaskData(None, words, train, valid)
    corpus = generate_corpus(config.data.synth)
    return TaskData(corpus.vocab, corpus.vocab.words, corpus.train, corpus.valid, corpus)


def resolve_config(config: RunConfig, vocab_size: int) -> RunConfig:
    """Copy of ``config`` with vocabulary sizes taken from the data."""
    cfg = copy.deepcopy(config)
    cfg.model.src_vocab_size = vocab_size
    cfg.model.tgt_vocab_size = vocab_size
    return cfg


def build_model(config: RunConfig) -> Seq2Seq:
    return Seq2Seq(config.model, config.method, config.target_encoder_input)


class Trainer:
    """Owns model, optimiser, schedule and the seeded streams for one run."""

    def __init__(self, config: RunConfig, train: Sequence[Pair], valid: Sequence[Pair] = ()):
        self.config = config
        self.model = build_model(config)
        o = config.optimizer
        self.optimizer = Adam(self.model.params, o.lr_peak, o.warmup, o.beta1, o.beta2, o.eps)
        s = config.schedule
        self.schedule = AnnealSchedule(config.anneal_steps, s.t_min, s.p_hard)
        self.mode_rng = np.random.default_rng([config.seed, 11])
        self.train_pairs = list(train)
        self.valid_pairs = list(valid)
        self.batches: Iterator = endless_batches(self.train_pairs, config.batch_size, config.seed)
        self.step = 0

    def train_step(self, batch=None) -> LossReport:
        batch = next(self.batches) if batch is None else batch
        c = self.config
        if c.method == "target_encoder":
            report = train_step(batch, self.model, self.schedule, self.optimizer, self.step, self.mode_rng,
                                c.lam, c.schedule.gumbel, c.schedule.regularize_hard_steps)
        elif c.method == "moe":
            report = moe_train_step(batch, self.model, self.optimizer, self.step)
        else:
            report = vanilla_step(batch, self.model, self.optimizer, self.step)
        self.step += 1
        return report

    def assignments(self, pairs: Sequence[Pair], chunk: int = 256) -> np.ndarray | None:
        """Domain each pair is routed to: target-encoder argmax, or E-step argmax for MoE."""
        if self.config.method == "vanilla" or not pairs:
            return None
        out = []
        for lo in range(0, len(pairs), chunk):
            part = pairs[lo:lo + chunk]
            b = make_batch([p.src for p in part], [p.tgt for p in part])
            if self.config.method == "target_encoder":
                out.append(assign_domains(self.model, b))
            else:
                before = self.model.decoder_forwards
                out.append(np.argmax(score_all_domains(self.model, b), axis=0))
                self.model.decoder_forwards = before
        return np.concatenate(out)

    def usage(self, pairs: Sequence[Pair] | None = None) -> UsageStats | None:
        a = self.assignments(self.valid_pairs if pairs is None else pairs)
        return None if a is None else domain_usage_stats(a, self.config.model.n_domains)

    def validate(self, chunk: int = 256) -> float:
        """Mean token NLL on the validation pairs with each pair's assigned domain."""
        pairs = self.valid_pairs
        if not pairs:
            return float("nan")
        m = self.model
        assigned = self.assignments(pairs)
        before = m.decoder_forwards
        total = count = 0.0
        m.eval()
        with T.no_grad():
            for lo in range(0, len(pairs), chunk):
                part = pairs[lo:lo + chunk]
                b = make_batch([p.src for p in part], [p.tgt for p in part])
                enc = m.encode_source(b.src, b.src_mask)
                e = None if assigned is None else m.domain_embedding(assigned[lo:lo + len(part)])
                logits = m.decode_teacher_forced(enc, e, b.tgt_in)
                n = b.n_target_tokens
                total += float(T.cross_entropy(logits, b.tgt_out, b.tgt_mask).data) * n
                count += n
        m.decoder_forwards = before
        return total / count


@dataclass
class TrainResult:
    trainer: Trainer
    reports: list[LossReport]
    valid: list[dict] = field(default_factory=list)
    usage: UsageStats | None = None
    output_dir: Path | None = None
    data: TaskData | None = None

    @property
    def model(self) -> Seq2Seq:
        return self.trainer.model


def _dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def run_training(config: RunConfig, write: bool = True, progress=None) -> TrainResult:
    """Train per ``config``; with ``write`` also fill the run directory.

    The run directory receives ``config.yaml`` (resolved), ``log.jsonl`` (one
    record per logged step plus validation and summary records),
    ``checkpoint.bin`` and the data splits under ``data/``.
    """
    data = load_task(config)
    cfg = resolve_config(config, len(data.words))
    trainer = Trainer(cfg, data.train, data.valid)
    out_dir = cfg.resolved_output_dir() if write else None
    reports: list[LossReport] = []
    valid: list[dict] = []

    def loop(log):
        if log:
            log.write(_dumps({"kind": "config", "config": cfg.to_dict()}) + "\n")
        for i in range(cfg.steps):
            r = trainer.train_step()
            reports.append(r)
            if log and (i % cfg.log_every == 0 or i == cfg.steps - 1):
                log.write(_dumps({"kind": "train", **r.record()}) + "\n")
            if (i + 1) % cfg.valid_every == 0 or i == cfg.steps - 1:
                rec = {"kind": "valid", "step": i, "valid_nll": trainer.validate()}
                u = trainer.usage()
                if u is not None:
                    rec.update(usage_entropy=u.entropy, usage_histogram=u.histogram, usage_max_share=u.max_share)
                valid.append(rec)
                if log:
                    log.write(_dumps(rec) + "\n")
                if progress:
                    progress(rec)

    if out_dir is None:
        loop(None)
    else:
        with run_lock(out_dir):
            (out_dir / "config.yaml").write_text(dump_config(cfg))
            if data.corpus is not None:
                (out_dir / "data").mkdir(exist_ok=True)
                write_pairs(out_dir / "data" / "train.jsonl", data.corpus.train, data.corpus.vocab)
                write_pairs(out_dir / "data" / "valid.jsonl", data.corpus.valid, data.corpus.vocab)
                write_corpus(out_dir / "data" / "test.jsonl", data.corpus.test, data.corpus.vocab)
            with open(out_dir / "log.jsonl", "w", encoding="utf-8") as log:
                loop(log)
                usage = trainer.usage()
                log.write(_dumps({
                    "kind": "summary", "steps": cfg.steps,
                    "decoder_forwards": trainer.model.decoder_forwards,
                    "decoder_forwards_per_step": trainer.model.decoder_forwards / cfg.steps,
                    "usage_entropy": None if usage is None else usage.entropy,
                    "usage_histogram": None if usage is None else usage.histogram,
                }) + "\n")
            ckpt = from_model(trainer.model, cfg, data.words, step=trainer.step,
                              temperature=trainer.schedule.advance(trainer.step) if cfg.method == "target_encoder" else 0.0,
                              frozen=trainer.schedule.frozen, adam=trainer.optimizer.state)
            checkpoint_save(out_dir / "checkpoint.bin", ckpt)
    return TrainResult(trainer, reports, valid, trainer.usage(), out_dir, data)
