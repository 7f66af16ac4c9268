"""Command line: train, translate, evaluate, bench."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .bench import cmd_bench_speed, rows_to_csv
from .checkpoint import CheckpointError, checkpoint_load
from .config import ConfigError, load_config
from .corpus import CorpusFormatError, read_records, source_batch
from .decoding import generate_all_domains, generate_baseline
from .metrics import corpus_bleu, mbleu, pairwise_bleu
from .train import RunLockedError, run_training


class VocabMismatchError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


def _encoder(words: Sequence[str]):
    index = {w: i for i, w in enumerate(words)}

    def encode(tokens, where):
        missing = sorted({t for t in tokens if t not in index})
        if missing:
            raise VocabMismatchError(f"{where}: tokens not in the checkpoint vocabulary: {missing}")
        return [index[t] for t in tokens]

    return encode


def cmd_translate(checkpoint: str, corpus: str, out: str, mode: str = "greedy", beam_size: int = 1,
                  num_hyps: int | None = None, max_len: int = 32, seed: int = 0, chunk: int = 256) -> int:
    """Write one record per hypothesis; returns the number of records.

    Domain models produce one hypothesis per domain. Vanilla models produce
    ``num_hyps`` (default: the beam size) hypotheses from one beam, or that
    many samples in ``sample`` mode.
    """
    ckpt = checkpoint_load(checkpoint)
    encode = _encoder(ckpt.vocab)
    records = read_records(corpus)
    srcs = [encode(r["src"], f"{corpus} id {r['id']}") for r in records]
    model = ckpt.build_model()
    rng = np.random.default_rng([seed, 29])
    k = num_hyps or beam_size
    lines = []
    for lo in range(0, len(records), chunk):
        src = source_batch(srcs[lo:lo + chunk])
        if model.method == "vanilla":
            sets = generate_baseline(model, src, k, mode, rng=rng, max_len=max_len)
        else:
            sets = generate_all_domains(model, src, mode, beam_size, max_len)
        for rec, hyps in zip(records[lo:lo + chunk], sets):
            for h in hyps:
                words = [ckpt.vocab[t] for t in h.content]
                lines.append(json.dumps({"source_id": rec["id"], "domain": h.domain, "tokens": words,
                                         "text": " ".join(words), "score": h.score},
                                        sort_keys=True, separators=(",", ":")))
    Path(out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return len(lines)


def read_hypotheses(path: str) -> dict[int, list[list[str]]]:
    """source id -> hypotheses, ordered by domain where one is given, else by file order."""
    grouped: dict[int, list[tuple]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, toks = rec["source_id"], rec["tokens"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise CorpusFormatError(f"{path}:{lineno}: expected {{source_id, tokens, ...}}") from None
            dom = rec.get("domain")
            grouped[sid].append((lineno if dom is None else dom, lineno, toks))
    return {sid: [t for _, _, t in sorted(v)] for sid, v in grouped.items()}


def evaluate_sets(hyp_sets: list[list[list[str]]], refs: list[list[list[str]]]) -> dict:
    n = len(hyp_sets[0])
    m = mbleu(hyp_sets, refs)
    report = {
        "n_sources": len(hyp_sets),
        "n_hyps_per_source": n,
        "mbleu": m.score,
        "mbleu_precisions": m.precisions,
        "mbleu_brevity_penalty": m.brevity_penalty,
        "pairwise_bleu": pairwise_bleu(hyp_sets).score if n >= 2 else None,
        "per_domain_bleu": [corpus_bleu([hs[k] for hs in hyp_sets], refs).score for k in range(n)],
    }
    exact = [[list(h) in [list(r) for r in rs] for h in hs] for hs, rs in zip(hyp_sets, refs)]
    report["domain_coverage"] = [float(np.mean([e[k] for e in exact])) for k in range(n)]
    report["mode_recovery"] = float(np.mean([all(e) for e in exact]))
    report["mean_distinct"] = float(np.mean([len({tuple(h) for h in hs}) for hs in hyp_sets]))
    report["mean_refs_covered"] = float(np.mean(
        [len({tuple(h) for h in hs} & {tuple(r) for r in rs}) for hs, rs in zip(hyp_sets, refs)]))
    return report


CSV_FIELDS = ("n_sources", "n_hyps_per_source", "mbleu", "pairwise_bleu", "mean_distinct", "mode_recovery")


def cmd_evaluate(hyp: str, ref: str, out: str | None = None) -> dict:
    """Score a hypothesis file against a reference corpus; writes ``out`` (JSON) and ``out`` + ``.csv``."""
    hyps = read_hypotheses(hyp)
    records = read_records(ref)
    ids = [r["id"] for r in records]
    missing = sorted(set(ids) - set(hyps))
    extra = sorted(set(hyps) - set(ids))
    if missing or extra:
        raise AlignmentError(f"hypotheses and references disagree: missing ids {missing}, unknown ids {extra}")
    hyp_sets = [hyps[i] for i in ids]
    sizes = {len(h) for h in hyp_sets}
    if len(sizes) != 1:
        bad = [i for i in ids if len(hyps[i]) != len(hyp_sets[0])]
        raise AlignmentError(f"unequal hypothesis counts per source {sorted(sizes)}; first offending ids {bad[:20]}")
    report = evaluate_sets(hyp_sets, [r["refs"] for r in records])
    if out:
        Path(out).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        w.writerow([report[k] for k in CSV_FIELDS])
        Path(str(out) + ".csv").write_text(buf.getvalue(), encoding="utf-8")
    return report


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="domainmt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train a model from a YAML/JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--quiet", action="store_true")
    tr = sub.add_parser("translate", help="decode a corpus with a checkpoint")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--mode", choices=("greedy", "beam", "sample"), default="greedy")
    tr.add_argument("--beam-size", type=int, default=1)
    tr.add_argument("--num-hyps", type=int, default=None, help="hypotheses per source for vanilla models")
    tr.add_argument("--max-len", type=int, default=32)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True)
    ev = sub.add_parser("evaluate", help="score hypotheses against references")
    ev.add_argument("--hyp", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--out", required=True)
    b = sub.add_parser("bench", help="training throughput against the number of domains")
    b.add_argument("--config", required=True)
    b.add_argument("--domains", default="3,10,50")
    b.add_argument("--methods", default="target_encoder,moe")
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--steps", type=int, default=10)
    b.add_argument("--out", required=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = load_config(args.config)
            progress = None if args.quiet else (lambda rec: print(json.dumps(rec, sort_keys=True), flush=True))
            res = run_training(cfg, progress=progress)
            print(f"checkpoint: {res.output_dir / 'checkpoint.bin'}")
        elif args.command == "translate":
            n = cmd_translate(args.checkpoint, args.corpus, args.out, args.mode, args.beam_size,
                              args.num_hyps, args.max_len, args.seed)
            print(f"wrote {n} hypotheses to {args.out}")
        elif args.command == "evaluate":
            report = cmd_evaluate(args.hyp, args.ref, args.out)
            print(json.dumps({k: report[k] for k in CSV_FIELDS}, sort_keys=True))
        elif args.command == "bench":
            cfg = load_config(args.config)
            domains = [int(x) for x in args.domains.split(",") if x]
            rows = cmd_bench_speed(cfg, domains, args.methods.split(","), args.warmup, args.steps)
            text = rows_to_csv(rows)
            Path(args.out).write_text(text, encoding="utf-8")
            sys.stdout.write(text)
    except (ConfigError, CheckpointError, CorpusFormatError, VocabMismatchError, AlignmentError,
            RunLockedError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
