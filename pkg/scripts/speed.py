"""Training throughput of the target encoder and hard-EM MoE as the number of domains grows."""

import argparse
from pathlib import Path

from domainmt.bench import cmd_bench_speed, rows_to_csv
from domainmt.experiments import desk_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--domains", default="3,10,50")
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--out", default="results/speed.csv")
    args = ap.parse_args()
    rows = cmd_bench_speed(desk_config(), [int(x) for x in args.domains.split(",")], steps=args.steps)
    text = rows_to_csv(rows)
    print(text, end="")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)


if __name__ == "__main__":
    main()
