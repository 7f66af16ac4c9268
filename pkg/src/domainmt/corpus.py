"""Synthetic one-to-many translation corpora.

Every source has K deterministic renderings ("modes"). Training pairs carry one
rendering drawn uniformly; the test split carries all K as references.

Sources are strictly increasing runs of content tokens, so a rendering's mode
can be read off the target alone (ascending copy, descending reversal,
scrambled substitution, marker-terminated rotation).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .nets import EOS, PAD, START, UNK

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class CorpusFormatError(ValueError):
    pass


@dataclass
class SynthSpec:
    vocab_size: int = 20
    n_modes: int = 4
    min_len: int = 5
    max_len: int = 10
    n_train: int = 5000
    n_valid: int = 200
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_modes < 2:
            raise ValueError("need at least 2 modes")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.max_len > self.vocab_size:
            raise ValueError("strictly increasing sources need max_len <= vocab_size")
        if min(self.n_train, self.n_valid, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")


class Vocabulary:
    """Reserved ids 0-3, then content words, then one marker per marked mode."""

    def __init__(self, n_content: int, n_modes: int = 2):
        self.words = list(RESERVED) + [f"w{i}" for i in range(n_content)]
        self.words += [f"<m{m}>" for m in range(3, n_modes)]
        self.index = {w: i for i, w in enumerate(self.words)}
        self.n_content = n_content
        self.content_ids = np.arange(len(RESERVED), len(RESERVED) + n_content)

    pad, start, eos, unk = PAD, START, EOS, UNK

    def __len__(self) -> int:
        return len(self.words)

    def marker(self, m: int) -> int:
        return self.index[f"<m{m}>"]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i == EOS:
                break
            if strip and i in (PAD, START):
                continue
            out.append(self.words[i])
        return out


class ModeFamily:
    """The K deterministic source-to-target renderings.

    0: copy. 1: reversal. 2: substitution through a seeded derangement of the
    content vocabulary. 3: rotate left by one, then append a marker. m >= 4:
    substitution through a further seeded derangement, rotation by a seeded
    offset, then that mode's own marker.
    """

    def __init__(self, vocab: Vocabulary, n_modes: int, seed: int):
        self.vocab = vocab
        self.n_modes = n_modes
        rng = np.random.default_rng([seed, 101])
        self.perms = {2: self._derangement(rng)}
        self.shifts: dict[int, int] = {3: 1}
        for m in range(4, n_modes):
            self.perms[m] = self._derangement(rng)
            self.shifts[m] = int(rng.integers(1, 4))

    def _derangement(self, rng: np.random.Generator) -> dict[int, int]:
        ids = self.vocab.content_ids
        while True:
            p = rng.permutation(ids)
            if not np.any(p == ids):
                return dict(zip(ids.tolist(), p.tolist()))

    def apply(self, src: Sequence[int], m: int) -> list[int]:
        if not 0 <= m < self.n_modes:
            raise ValueError(f"mode {m} outside [0, {self.n_modes})")
        src = list(src)
        if m == 0:
            return src
        if m == 1:
            return src[::-1]
        out = [self.perms[m][t] for t in src] if m in self.perms else src
        if m >= 3:
            r = self.shifts[m] % len(src)
            out = out[r:] + out[:r] + [self.vocab.marker(m)]
        return out

    def renderings(self, src: Sequence[int]) -> list[list[int]]:
        return [self.apply(src, m) for m in range(self.n_modes)]

    def modes_of(self, src: Sequence[int], tgt: Sequence[int]) -> list[int]:
        return [m for m in range(self.n_modes) if self.apply(src, m) == list(tgt)]


def apply_mode(src: Sequence[int], m: int, family: ModeFamily) -> list[int]:
    return family.apply(src, m)


@dataclass
class Pair:
    src: list[int]
    tgt: list[int]
    mode: int = -1


@dataclass
class Entry:
    id: int
    src: list[int]
    refs: list[list[int]]


@dataclass
class Corpus:
    spec: SynthSpec
    vocab: Vocabulary
    family: ModeFamily
    train: list[Pair] = field(default_factory=list)
    valid: list[Pair] = field(default_factory=list)
    test: list[Entry] = field(default_factory=list)


def generate_corpus(spec: SynthSpec) -> Corpus:
    vocab = Vocabulary(spec.vocab_size, spec.n_modes)
    family = ModeFamily(vocab, spec.n_modes, spec.seed)
    rng = np.random.default_rng([spec.seed, 202])
    total = spec.n_train + spec.n_valid + spec.n_test
    seen: set[tuple[int, ...]] = set()
    sources: list[list[int]] = []
    attempts = 0
    while len(sources) < total:
        attempts += 1
        if attempts > 100 * total + 1000:
            raise RuntimeError("could not draw enough distinct, mode-separable sources")
        L = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = sorted(rng.choice(vocab.content_ids, size=L, replace=False).tolist())
        key = tuple(src)
        if key in seen:
            continue
        outs = family.renderings(src)
        if len({tuple(o) for o in outs}) < spec.n_modes:
            continue  # some pair of modes coincides on this source
        seen.add(key)
        sources.append(src)
    modes = rng.integers(0, spec.n_modes, size=spec.n_train + spec.n_valid)
    pairs = [Pair(s, family.apply(s, int(m)), int(m)) for s, m in zip(sources, modes)]
    test = [Entry(i, s, family.renderings(s)) for i, s in enumerate(sources[spec.n_train + spec.n_valid:])]
    return Corpus(spec, vocab, family, pairs[:spec.n_train], pairs[spec.n_train:], test)


@dataclass
class Batch:
    src: np.ndarray  # B x Ls, eos-terminated
    tgt_in: np.ndarray  # B x Lt: start, y_1 .. y_L
    tgt_out: np.ndarray  # B x Lt: y_1 .. y_L, eos
    src_mask: np.ndarray
    tgt_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def tgt_full(self) -> np.ndarray:
        """start, y, eos: the target encoder's input."""
        return np.concatenate([self.tgt_in[:, :1], self.tgt_out], axis=1)

    @property
    def src_with_start(self) -> np.ndarray:
        return np.concatenate([np.full((self.size, 1), START), self.src], axis=1)

    @property
    def n_target_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def _pad(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    out = np.full((len(seqs), max(len(s) for s in seqs)), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def make_batch(srcs: Sequence[Sequence[int]], tgts: Sequence[Sequence[int]]) -> Batch:
    src = _pad([list(s) + [EOS] for s in srcs])
    tgt_in = _pad([[START] + list(t) for t in tgts])
    tgt_out = _pad([list(t) + [EOS] for t in tgts])
    return Batch(src, tgt_in, tgt_out, src != PAD, tgt_out != PAD)


def source_batch(srcs: Sequence[Sequence[int]]) -> np.ndarray:
    return _pad([list(s) + [EOS] for s in srcs])


def batch_iter(pairs: Sequence[Pair], batch_size: int, seed: int, epoch: int) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, 303, epoch]).permutation(len(pairs))
    for lo in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[lo:lo + batch_size]]
        yield make_batch([p.src for p in chunk], [p.tgt for p in chunk])


def endless_batches(pairs: Sequence[Pair], batch_size: int, seed: int) -> Iterator[Batch]:
    epoch = 0
    while True:
        yield from batch_iter(pairs, batch_size, seed, epoch)
        epoch += 1


# -- files -----------------------------------------------------------------------
def _record(i: int, src: Sequence[str], refs: Sequence[Sequence[str]]) -> str:
    return json.dumps({"id": i, "src": list(src), "refs": [list(r) for r in refs]}, separators=(",", ":"))


def write_corpus(path: str | os.PathLike, entries: Sequence[Entry], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(_record(e.id, vocab.decode(e.src), [vocab.decode(r) for r in e.refs]) + "\n")


def write_pairs(path: str | os.PathLike, pairs: Sequence[Pair], vocab: Vocabulary) -> None:
    write_corpus(path, [Entry(i, p.src, [p.tgt]) for i, p in enumerate(pairs)], vocab)


def read_records(path: str | os.PathLike) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if (not isinstance(rec, dict) or not isinstance(rec.get("id"), int)
                    or not isinstance(rec.get("src"), list) or not isinstance(rec.get("refs"), list)
                    or not all(isinstance(r, list) for r in rec["refs"])):
                raise CorpusFormatError(f"{path}:{lineno}: expected {{id: int, src: [...], refs: [[...], ...]}}")
            records.append(rec)
    return records


def read_corpus(path: str | os.PathLike, vocab: Vocabulary) -> list[Entry]:
    return [Entry(r["id"], vocab.encode(r["src"]), [vocab.encode(x) for x in r["refs"]]) for r in read_records(path)]


def spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
