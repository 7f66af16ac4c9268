"""Regularizer and target-encoder-input ablations on the desk-scale task.

``lam`` sweeps lambda over several seeds and reports usage entropy and
collapse; ``source`` feeds the source sentence to the latent encoder.
"""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from domainmt.experiments import collapsed, desk_config, run_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("which", choices=["lam", "source"])
    ap.add_argument("--lams", default="0,100")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--steps", type=int, default=8000)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    rows = []
    if args.which == "lam":
        for lam in map(float, args.lams.split(",")):
            for seed in map(int, args.seeds.split(",")):
                _, rep = run_desk(desk_config(seed=seed, steps=args.steps, lam=lam))
                row = {"lam": lam, "seed": seed, "collapsed": collapsed(rep.usage_entropy, 4), **asdict(rep)}
                print(json.dumps({k: row[k] for k in ("lam", "seed", "collapsed")}), rep.line(), flush=True)
                rows.append(row)
    else:
        for seed in map(int, args.seeds.split(",")):
            _, rep = run_desk(desk_config(seed=seed, steps=args.steps, target_encoder_input="source"))
            print(f"seed {seed}", rep.line(), flush=True)
            rows.append({"seed": seed, **asdict(rep)})
    out = Path(args.out or f"results/ablation_{args.which}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
