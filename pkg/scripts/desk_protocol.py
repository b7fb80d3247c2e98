"""Three-seed desk-scale protocol: adapted vs baselines on the target, third domain and retrieval.

    python scripts/desk_protocol.py --variants full,source_only,target_only --seeds 0,1,2
"""

import argparse
import csv
import logging
import sys

import numpy as np

from segada.experiments import median_over_seeds, run_protocol
from segada.trainer import TrainConfig


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--variants", default="full,source_only,target_only,feature_space_d")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--iterations", type=int, default=TrainConfig.iterations)
    p.add_argument("--out", default="desk_protocol.csv")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    variants = args.variants.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    records = run_protocol(variants, seeds, base=TrainConfig(iterations=args.iterations, eval_interval=1000))

    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["variant", "seed", "target_miou", "source_miou", "third_miou", "A_50", "B_50", "seconds"])
        for (v, s), r in records.items():
            ret = r.retrieval
            wr.writerow([v, s, r.target_miou, r.source_miou, r.third_miou, ret.a_k[0], ret.b_k[0], round(r.seconds, 1)])
    print(f"{'variant':>16} {'target':>7} {'third':>7} {'A_50':>6} {'B_50':>6}   (medians over {len(seeds)} seeds)")
    for v in variants:
        med = [median_over_seeds(records, v, f) for f in (
            lambda r: r.target_miou, lambda r: r.third_miou, lambda r: r.retrieval.a_k[0],
            lambda r: r.retrieval.b_k[0])]
        print(f"{v:>16} {100 * med[0]:7.1f} {100 * med[1]:7.1f} {med[2]:6.1f} {med[3]:6.1f}")


if __name__ == "__main__":
    sys.exit(main())
