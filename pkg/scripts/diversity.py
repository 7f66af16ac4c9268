"""Desk-scale diversity experiment: domain model vs. beam-4 vanilla (and optionally hard-EM MoE)."""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from domainmt.experiments import desk_config, run_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--methods", default="target_encoder,vanilla")
    ap.add_argument("--out", default="results/diversity.json")
    args = ap.parse_args()
    rows = []
    for method in args.methods.split(","):
        _, rep = run_desk(desk_config(method, seed=args.seed, steps=args.steps),
                          progress=lambda r: print(json.dumps(r), flush=True))
        print(rep.line(), flush=True)
        rows.append(asdict(rep))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
