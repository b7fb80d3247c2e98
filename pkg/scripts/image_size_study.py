"""Target mIoU of the adapted model and the source-only baseline at several image sizes."""

import argparse
import logging
from dataclasses import replace

from segada.data import DataConfig
from segada.experiments import median_over_seeds, run_protocol
from segada.trainer import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--sizes", default="32,64,128")
    p.add_argument("--seeds", default="0")
    p.add_argument("--iterations", type=int, default=TrainConfig.iterations)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    seeds = [int(s) for s in args.seeds.split(",")]
    print("size,variant,target_miou")
    for size in (int(s) for s in args.sizes.split(",")):
        data = replace(DataConfig(), height=size, width=size)
        recs = run_protocol(["source_only", "full"], seeds, data=data,
                            base=TrainConfig(iterations=args.iterations, eval_interval=args.iterations),
                            retrieval_k=())
        for v in ("source_only", "full"):
            print(f"{size},{v},{median_over_seeds(recs, v, lambda r: r.target_miou):.4f}", flush=True)


if __name__ == "__main__":
    main()
