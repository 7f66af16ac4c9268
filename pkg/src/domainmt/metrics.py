"""Corpus BLEU-4 with multiple references, mBLEU, Pairwise-BLEU and domain-usage stats.

Tokens may be any hashable values (vocabulary ids or whitespace-split words).
No smoothing: a zero precision at any order gives a score of 0.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

Sentence = Sequence[Hashable]

MAX_ORDER = 4


class MetricError(ValueError):
    pass


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list[int]
    totals: list[int]


def _ngrams(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(hyp_len: int, refs: Sequence[Sentence]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def bleu_from_stats(matches: Sequence[int], totals: Sequence[int], hyp_len: int, ref_len: int) -> BleuReport:
    precisions = [m / t if t > 0 else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(score, precisions, bp, hyp_len, ref_len, list(matches), list(totals))


def corpus_bleu(hyps: Sequence[Sentence], refs: Sequence[Sequence[Sentence]]) -> BleuReport:
    """BLEU-4 over a corpus; ``refs[i]`` lists the references of ``hyps[i]``."""
    if len(hyps) != len(refs):
        raise MetricError(f"{len(hyps)} hypotheses but {len(refs)} reference lists")
    if not hyps:
        raise MetricError("empty corpus")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, rs in zip(hyps, refs):
        if not rs:
            raise MetricError("every hypothesis needs at least one reference")
        hyp_len += len(hyp)
        ref_len += _closest_ref_len(len(hyp), rs)
        for n in range(1, MAX_ORDER + 1):
            h = _ngrams(hyp, n)
            best: Counter = Counter()
            for r in rs:
                best |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    return bleu_from_stats(matches, totals, hyp_len, ref_len)


def _check_sets(hyp_sets: Sequence[Sequence[Sentence]]) -> int:
    if not hyp_sets:
        raise MetricError("empty corpus")
    sizes = {len(hs) for hs in hyp_sets}
    if len(sizes) != 1:
        raise MetricError(f"ragged hypothesis sets: sizes {sorted(sizes)}")
    return sizes.pop()


def mbleu(hyp_sets: Sequence[Sequence[Sentence]], refs: Sequence[Sequence[Sentence]]) -> BleuReport:
    """Every per-domain hypothesis scored against its source's full reference set."""
    _check_sets(hyp_sets)
    if len(hyp_sets) != len(refs):
        raise MetricError(f"{len(hyp_sets)} hypothesis sets but {len(refs)} reference sets")
    flat_h, flat_r = [], []
    for hs, rs in zip(hyp_sets, refs):
        for h in hs:
            flat_h.append(h)
            flat_r.append(rs)
    return corpus_bleu(flat_h, flat_r)


def pairwise_bleu(hyp_sets: Sequence[Sequence[Sentence]]) -> BleuReport:
    """BLEU over all ordered pairs (j, k), j != k, of a source's own hypotheses."""
    n = _check_sets(hyp_sets)
    if n < 2:
        raise MetricError("pairwise BLEU needs at least 2 hypotheses per source")
    flat_h, flat_r = [], []
    for hs in hyp_sets:
        for j in range(n):
            for k in range(n):
                if j != k:
                    flat_h.append(hs[j])
                    flat_r.append([hs[k]])
    return corpus_bleu(flat_h, flat_r)


@dataclass
class UsageStats:
    histogram: list[float]
    entropy: float
    max_share: float
    count: float


def domain_usage_stats(assignments=None, n_domains: int | None = None, posteriors=None) -> UsageStats:
    """Usage of each domain from hard assignments or from posterior rows."""
    if posteriors is not None:
        hist = np.asarray(posteriors, dtype=np.float64).sum(axis=0)
    else:
        a = np.asarray(assignments, dtype=np.int64)
        if a.size == 0:
            raise MetricError("no assignments")
        hist = np.bincount(a, minlength=n_domains or int(a.max()) + 1).astype(np.float64)
    total = hist.sum()
    if total <= 0:
        raise MetricError("empty usage histogram")
    share = hist / total
    nz = share[share > 0]
    return UsageStats(hist.tolist(), float(-(nz * np.log(nz)).sum()), float(share.max()), float(total))
