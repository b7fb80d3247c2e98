"""Multi-seed experiment protocol shared by the scripts and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .data import DataConfig, Splits, make_splits
from .evaluation import evaluate, evaluate_third_domain, retrieval_sets, run_retrieval
from .networks import BundleConfig, forward_F, forward_G
from .tensor import Tensor
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    variant: str
    seed: int
    seconds: float
    target_miou: float
    source_miou: float
    third_miou: float
    evals: list
    rec_curve: Optional[np.ndarray] = None  # rec_s + rec_t per iteration
    retrieval: Optional[object] = None
    g_range: Optional[tuple] = None
    bundle: Optional[object] = field(default=None, repr=False)


def moving_average(values: np.ndarray, end: int, window: int = 500) -> float:
    """Mean of ``values`` over iterations ``end - window + 1 .. end`` (1-based)."""
    if end < window or end > len(values):
        raise ValueError(f"window ending at {end} needs {window} values, have {len(values)}")
    return float(np.mean(values[end - window:end]))


def generator_range(bundle, images) -> tuple:
    lo, hi = np.inf, -np.inf
    rng = np.random.default_rng(0)
    with T.no_record():
        for img in images:
            emb = forward_F(bundle, Tensor(img))
            for training in (False, True):
                out = forward_G(bundle, emb, training, rng).data
                lo, hi = min(lo, float(out.min())), max(hi, float(out.max()))
    return lo, hi


def run_one(variant: str, seed: int, splits: Splits, base: TrainConfig = TrainConfig(),
            model: BundleConfig = BundleConfig(), retrieval_k=(50,), pool=200, queries=100) -> RunRecord:
    cfg = replace(base, variant=variant, seed=seed)
    t0 = time.perf_counter()
    res = train(cfg, splits, model=model)
    seconds = time.perf_counter() - t0
    b = res.state.bundle
    rec = RunRecord(variant, seed, seconds,
                    target_miou=evaluate(b, splits.target_test).miou,
                    source_miou=evaluate(b, splits.source_val).miou,
                    third_miou=evaluate_third_domain(b, splits.third_test).miou,
                    evals=res.evals, bundle=b)
    if retrieval_k:
        rec.retrieval = run_retrieval(b, retrieval_sets(splits, pool, queries), list(retrieval_k))
    if "G" in b.nets:
        rec.rec_curve = np.array([r.rec_s + r.rec_t for _, r in res.metrics])
        rec.g_range = generator_range(b, splits.target_test.images[:50])
    log.info("%s seed %d: target %.4f source %.4f third %.4f (%.0f s)", variant, seed, rec.target_miou,
             rec.source_miou, rec.third_miou, seconds)
    return rec


def run_protocol(variants, seeds=(0, 1, 2), data: DataConfig = DataConfig(), base: TrainConfig = TrainConfig(),
                 model: BundleConfig = BundleConfig(), **kw) -> dict:
    """Train every (variant, seed) pair on the seed's own data draw; returns {(variant, seed): RunRecord}."""
    out = {}
    for seed in seeds:
        splits = make_splits(replace(data, seed=seed))
        for v in variants:
            out[(v, seed)] = run_one(v, seed, splits, base, model, **kw)
    return out


def median_over_seeds(records: dict, variant: str, getter) -> float:
    return float(np.median([getter(r) for (v, _), r in records.items() if v == variant]))
