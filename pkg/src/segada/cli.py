"""Command-line entry point: ``segada gen-data | train | eval | retrieve | ablate``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .checkpoint import CheckpointError
from .data import CLASS_NAMES, DatasetFormatError, make_splits, read_dataset, read_splits, write_splits
from .evaluation import evaluate, retrieval_sets, run_retrieval
from .trainer import ABLATION_ORDER, VARIANTS, load_checkpoint, train

log = logging.getLogger("segada")

SPLIT_NAMES = ("source_train", "source_val", "target_train", "target_test", "third_test")


class UsageError(Exception):
    pass


def _threads():
    """Cap BLAS threads when SEGADA_THREADS is set."""
    n = os.environ.get("SEGADA_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _load_config(path) -> config_mod.RunConfig:
    return config_mod.load(path) if path else config_mod.RunConfig()


def _echo_config(cfg, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_mod.dumps(cfg))


def _read_splits(data_dir):
    if not (Path(data_dir) / "manifest.json").exists():
        raise UsageError(f"{data_dir}: no manifest.json (run gen-data first)")
    return read_splits(data_dir)


# ---------------------------------------------------------------- verbs


def cmd_gen_data(args) -> None:
    cfg = _load_config(args.config)
    out = Path(args.out)
    splits = make_splits(cfg.data)
    try:
        write_splits(splits, out, cfg.data)
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    _echo_config(cfg, out)
    for name, ds in splits.items():
        print(f"{name}: {len(ds)} samples ({ds.domain})")


def _train_one(cfg, splits, out: Path):
    _echo_config(cfg, out)
    return train(cfg.train, splits, out, model=cfg.bundle_config())


def cmd_train(args) -> None:
    cfg = _load_config(args.config)
    if args.variant:
        cfg = config_mod.override(cfg, variant=args.variant)
    if args.iterations is not None:
        cfg = config_mod.override(cfg, iterations=args.iterations)
    splits = _read_splits(args.data)
    res = _train_one(cfg, splits, Path(args.out))
    last = res.evals[-1] if res.evals else None
    print(f"{cfg.train.variant}: {cfg.train.iterations} iterations in {res.seconds:.0f} s; checkpoint {res.checkpoint}")
    if last:
        print(f"source-val mIoU {last[1]:.4f}, target-test mIoU {last[2]:.4f}")


def _check_dims(state, ds, what: str) -> None:
    have = tuple(state.bundle.config.image_size)
    if tuple(ds.size) != have or ds.num_classes != state.bundle.config.num_classes:
        raise UsageError(f"dimension mismatch: checkpoint expects {have[0]}x{have[1]} images with "
                         f"{state.bundle.config.num_classes} classes, {what} holds {ds.size[0]}x{ds.size[1]} "
                         f"with {ds.num_classes} classes")


def cmd_eval(args) -> None:
    state = load_checkpoint(args.checkpoint)
    path = Path(args.data)
    ds = read_dataset(path) if path.is_file() else getattr(_read_splits(path), args.split)
    _check_dims(state, ds, f"split {args.split}")
    report = evaluate(state.bundle, ds, args.upsample)
    names = CLASS_NAMES[:len(report.iou)]
    text = report.to_csv(names)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    sys.stdout.write(report.table(f"{state.config.variant} / {args.split}", names))


def _embedding_signature(state):
    return [(n, p.data.shape) for n, p in state.bundle.params("F").items()]


def cmd_retrieve(args) -> None:
    cfg = _load_config(args.config)
    a, b = load_checkpoint(args.checkpoint_a), load_checkpoint(args.checkpoint_b)
    if _embedding_signature(a) != _embedding_signature(b) or a.bundle.config.image_size != b.bundle.config.image_size:
        raise UsageError("architecture mismatch: the two checkpoints have different embedding networks")
    ks = [int(k) for k in args.k_list.split(",")] if args.k_list else list(cfg.eval.k_list)
    splits = _read_splits(args.data)
    _check_dims(a, splits.source_train, "the data")
    sets = retrieval_sets(splits, cfg.eval.pool_per_domain, cfg.eval.queries_per_domain)
    ra, rb = run_retrieval(a.bundle, sets, ks), run_retrieval(b.bundle, sets, ks)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["k", "A_k_modelA", "A_k_modelB", "B_k_modelA", "B_k_modelB"])
    for i, k in enumerate(ks):
        wr.writerow([k, repr(ra.a_k[i]), repr(rb.a_k[i]), repr(ra.b_k[i]), repr(rb.b_k[i])])
    summary = (f"pool {ra.n_src} source + {ra.n_tgt} target, queries {ra.n_query_s} source + {ra.n_query_t} target\n"
               f"mAP source->target: modelA {ra.map_s2t:.4f}, modelB {rb.map_s2t:.4f}\n"
               f"mAP target->source: modelA {ra.map_t2s:.4f}, modelB {rb.map_t2s:.4f}\n")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "retrieval.csv").write_text(buf.getvalue())
        (out / "retrieval_summary.txt").write_text(summary)
    sys.stdout.write(buf.getvalue())
    sys.stdout.write(summary)


ABLATION_COLUMNS = ["variant", "source_val_miou", "target_test_miou", "third_test_miou", "checkpoint"]


def cmd_ablate(args) -> None:
    cfg = _load_config(args.config)
    if args.iterations is not None:
        cfg = config_mod.override(cfg, iterations=args.iterations)
    splits = _read_splits(args.data)
    out = Path(args.out)
    _echo_config(cfg, out)
    rows = []
    for variant in ABLATION_ORDER:
        run_cfg = config_mod.override(cfg, variant=variant)
        res = _train_one(run_cfg, splits, out / variant)
        b = res.state.bundle
        rows.append([variant, evaluate(b, splits.source_val).miou, evaluate(b, splits.target_test).miou,
                     evaluate(b, splits.third_test).miou, f"{variant}/final.sgda"])
        log.info("%s done: target-test mIoU %.4f", variant, rows[-1][2] or 0.0)
    with open(out / "ablation.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ABLATION_COLUMNS)
        for r in rows:
            wr.writerow([r[0]] + ["" if v is None else repr(v) for v in r[1:4]] + [r[4]])
    for r in rows:
        print(f"{r[0]:>16}  target-test mIoU {100 * (r[2] or 0):5.1f}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segada", description="Adversarial segmentation domain adaptation on toy data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at eval points")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-data", help="generate the five dataset splits")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--iterations", type=int, help="override train.iterations")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class IoU of a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory or a single .sgds file")
    e.add_argument("--split", default="target_test", choices=SPLIT_NAMES + ("third",))
    e.add_argument("--upsample", type=int, default=1)
    e.add_argument("--out", help="write the IoU CSV here instead of stdout")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("retrieve", help="cross-domain k-NN retrieval for two checkpoints")
    r.add_argument("--checkpoint-a", required=True)
    r.add_argument("--checkpoint-b", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--k-list", help="comma-separated k values (default from eval.k_list)")
    r.add_argument("--config")
    r.add_argument("--out")
    r.set_defaults(func=cmd_retrieve)

    a = sub.add_parser("ablate", help="train all five ablation variants and tabulate mIoU")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--iterations", type=int, help="override train.iterations")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "split", None) == "third":
        args.split = "third_test"
    try:
        with _threads():
            args.func(args)
    except (UsageError, config_mod.ConfigError, DatasetFormatError, CheckpointError, ValueError,
            PermissionError, FloatingPointError, OSError) as exc:
        print(f"segada {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
