"""Greedy, beam and ancestral-sampling decoders plus the per-domain fan-out.

Decoders drive a *stepper*: any object with

    step(state, prefix) -> (logprobs [B x V], new_state)
    select(state, rows) -> state

and an initial state. ``TransformerStepper`` adapts a ``Seq2Seq``; tests use
hand-rigged steppers.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from . import tensor as T
from .nets import EOS, Seq2Seq, SourceEncoding


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    domain: int | None = None

    @property
    def content(self) -> list[int]:
        """Tokens without the trailing end-of-sequence marker."""
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else list(self.tokens)


class Stepper(Protocol):
    def step(self, state: Any, prefix: np.ndarray) -> tuple[np.ndarray, Any]: ...

    def select(self, state: Any, rows: np.ndarray) -> Any: ...


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class TransformerStepper:
    def __init__(self, model: Seq2Seq):
        self.model = model

    def init(self, enc: SourceEncoding, e) -> Any:
        return self.model.start_decoding(enc, e)

    def step(self, state, prefix):
        logits, new = self.model.decode_one_step(state.enc, state.e, prefix, state)
        return log_softmax_np(logits.astype(np.float64)), new

    def select(self, state, rows):
        return state.select(rows)


def _batch_walk(stepper: Stepper, state, batch: int, max_len: int, choose) -> list[Hypothesis]:
    prefix = np.zeros((batch, 0), dtype=np.int64)
    scores = np.zeros(batch)
    done = np.zeros(batch, dtype=bool)
    for _ in range(max_len):
        logp, state = stepper.step(state, prefix)
        tok = choose(logp)
        tok = np.where(done, EOS, tok)
        scores += np.where(done, 0.0, logp[np.arange(batch), tok])
        prefix = np.concatenate([prefix, tok[:, None]], axis=1)
        done |= tok == EOS
        if done.all():
            break
    hyps = []
    for i in range(batch):
        row = prefix[i].tolist()
        if EOS in row:
            row = row[:row.index(EOS) + 1]
        hyps.append(Hypothesis(row, float(scores[i])))
    return hyps


def greedy_decode(stepper: Stepper, state, batch: int, max_len: int) -> list[Hypothesis]:
    """Argmax token at every step (lowest id on ties) until end-of-sequence or ``max_len``."""
    return _batch_walk(stepper, state, batch, max_len, lambda lp: np.argmax(lp, axis=-1))


def sample_decode(stepper: Stepper, state, batch: int, rng: np.random.Generator,
                  max_len: int) -> list[Hypothesis]:
    """Ancestral sampling at temperature 1."""

    def choose(lp):
        p = np.exp(lp)
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random(p.shape[0])
        tok = (np.cumsum(p, axis=-1) < u[:, None]).sum(axis=-1)
        return np.minimum(tok, p.shape[1] - 1)

    return _batch_walk(stepper, state, batch, max_len, choose)


def beam_decode(stepper: Stepper, state, beam_size: int, max_len: int,
                length_norm: bool = False) -> list[Hypothesis]:
    """Beam search for a single source; returns ``beam_size`` hypotheses best-first.

    Scores are sums of token log-probabilities. Each step keeps the top
    ``beam_size`` extensions; those ending in end-of-sequence retire to a
    completed pool and the rest stay live. Search stops when nothing is live,
    when ``beam_size`` completed hypotheses score at least as well as the best
    live one, or at ``max_len``. Fewer completions are padded with the best live
    hypotheses. Ties go to the earlier expansion (lower beam row, then lower
    token id).
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")

    def rank(score, length):
        return score / length if length_norm else score

    live_tokens = np.zeros((1, 0), dtype=np.int64)
    live_scores = np.zeros(1)
    completed: list[tuple[float, int, list[int], float]] = []  # (-rank, order, tokens, score)
    order = 0
    for t in range(max_len):
        logp, state = stepper.step(state, live_tokens)
        cand = (live_scores[:, None] + logp).reshape(-1)
        V = logp.shape[1]
        # the top beam_size candidates take the slots; finished ones retire
        idx = np.argsort(-cand, kind="stable")[:beam_size]
        keep_rows, keep_toks, keep_scores = [], [], []
        for flat in idx:
            row, tok = divmod(int(flat), V)
            sc = float(cand[flat])
            if tok == EOS:
                toks = live_tokens[row].tolist() + [EOS]
                heapq.heappush(completed, (-rank(sc, len(toks)), order, toks, sc))
                order += 1
                if len(completed) > beam_size:
                    completed = heapq.nsmallest(beam_size, completed)
                continue
            keep_rows.append(row)
            keep_toks.append(tok)
            keep_scores.append(sc)
        if not keep_rows:
            live_tokens = live_tokens[:0]
            break
        rows = np.asarray(keep_rows)
        state = stepper.select(state, rows)
        live_tokens = np.concatenate([live_tokens[rows], np.asarray(keep_toks)[:, None]], axis=1)
        live_scores = np.asarray(keep_scores)
        if len(completed) >= beam_size:
            worst_kept = max(c[0] for c in completed)
            # without length normalisation, extending a live hypothesis only lowers its score
            if not length_norm and -rank(live_scores[0], t + 1) >= worst_kept:
                break
    pool = sorted(completed)[:beam_size]
    out = [Hypothesis(toks, sc) for _, _, toks, sc in pool]
    for row in range(len(live_tokens)):
        if len(out) >= beam_size:
            break
        out.append(Hypothesis(live_tokens[row].tolist(), float(live_scores[row])))
    return out


# -- model-level helpers -----------------------------------------------------------
def _encode(model: Seq2Seq, src: np.ndarray) -> SourceEncoding:
    model.eval()
    with T.no_grad():
        return model.encode_source(src)


def domain_vectors(model: Seq2Seq, k: int, batch: int) -> np.ndarray:
    if model.method == "vanilla":
        return np.repeat(model.params["dec.emb"].data[1][None], batch, axis=0)
    return np.repeat(model.params["dec.domain_emb"].data[:, k][None], batch, axis=0)


def generate_all_domains(model: Seq2Seq, src: np.ndarray, mode: str = "greedy", beam_size: int = 1,
                         max_len: int = 32) -> list[list[Hypothesis]]:
    """One hypothesis per domain for every source row of ``src``.

    Beam mode runs one beam per domain and keeps its best hypothesis.
    """
    N = model.config.n_domains
    enc = _encode(model, src)
    B = src.shape[0]
    stepper = TransformerStepper(model)
    out: list[list[Hypothesis]] = [[] for _ in range(B)]
    for k in range(N):
        e = domain_vectors(model, k, B)
        if mode == "greedy":
            hyps = greedy_decode(stepper, stepper.init(enc, e), B, max_len)
        elif mode == "beam":
            hyps = []
            for i in range(B):
                st = stepper.init(enc.select([i]), e[i:i + 1])
                hyps.append(beam_decode(stepper, st, beam_size, max_len)[0])
        else:
            raise ValueError(f"unknown decoding mode {mode!r}")
        for i, h in enumerate(hyps):
            h.domain = k
            out[i].append(h)
    return out


def generate_baseline(model: Seq2Seq, src: np.ndarray, k: int, mode: str = "beam",
                      rng: np.random.Generator | None = None, max_len: int = 32) -> list[list[Hypothesis]]:
    """K hypotheses per source without domains: the full beam, or K samples."""
    enc = _encode(model, src)
    B = src.shape[0]
    stepper = TransformerStepper(model)
    e = domain_vectors(model, 0, B)
    if mode == "beam":
        return [beam_decode(stepper, stepper.init(enc.select([i]), e[i:i + 1]), k, max_len) for i in range(B)]
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling needs an rng")
        rows = np.repeat(np.arange(B), k)
        hyps = sample_decode(stepper, stepper.init(enc.select(rows), e[rows]), B * k, rng, max_len)
        return [hyps[i * k:(i + 1) * k] for i in range(B)]
    if mode == "greedy":
        return [[h] for h in greedy_decode(stepper, stepper.init(enc, e), B, max_len)]
    raise ValueError(f"unknown decoding mode {mode!r}")


def strip_hyps(hyp_sets: Sequence[Sequence[Hypothesis]]) -> list[list[list[int]]]:
    return [[h.content for h in hs] for hs in hyp_sets]
