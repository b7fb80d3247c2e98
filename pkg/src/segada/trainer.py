"""Three-phase adversarial training (D, then G, then F with C), baselines and ablations."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .checkpoint import read_records, write_records
from .evaluation import evaluate
from .losses import LossReport, LossWeights, domain_loss, loss_D, loss_F, loss_G
from .networks import (BundleConfig, NetworkBundle, build_bundle, forward_C, forward_D, forward_D_feat,
                       forward_F, forward_G)
from .optim import adam_step
from .seeding import rng_from_words, rng_state_words, stream
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_aux", "no_patch", "feature_space_d", "source_only", "target_only")
ADVERSARIAL = ("full", "no_aux", "no_patch")
# row order of the ablation table
ABLATION_ORDER = ("source_only", "feature_space_d", "no_patch", "no_aux", "full")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    lr_fc: float = 1e-5
    lr_gd: float = 2e-4
    batch_size: int = 1
    alpha: float = 0.1
    beta: float = 0.1
    seed: int = 0
    eval_interval: int = 500
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        LossWeights(self.alpha, self.beta)

    @property
    def weights(self) -> LossWeights:
        alpha = 0.0 if self.variant == "no_aux" else self.alpha
        return LossWeights(alpha, self.beta)


def bundle_kind(variant: str) -> str:
    if variant in ADVERSARIAL:
        return "adversarial"
    if variant == "feature_space_d":
        return "feature_d"
    return "classifier"


@dataclass
class TrainerState:
    bundle: NetworkBundle
    config: TrainConfig
    sampler: np.random.Generator
    dropout: np.random.Generator
    iteration: int = 0


def init_state(config: TrainConfig, model: BundleConfig = BundleConfig()) -> TrainerState:
    model = replace(model, kind=bundle_kind(config.variant))
    bundle = build_bundle(model, config.seed)
    return TrainerState(bundle, config, stream(config.seed, "sampler"), stream(config.seed, "dropout"))


# ---------------------------------------------------------------- sampling


def sample_triplet(state: TrainerState, source, target):
    """Independent uniform draws: (source image, source labels, target image)."""
    if len(source) == 0 or len(target) == 0:
        raise ValueError("cannot sample from an empty dataset")
    i = int(state.sampler.integers(len(source)))
    j = int(state.sampler.integers(len(target)))
    return source.images[i], source.labels[i], target.images[j]


def sample_labeled(state: TrainerState, dataset):
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    i = int(state.sampler.integers(len(dataset)))
    return dataset.images[i], dataset.labels[i]


# ---------------------------------------------------------------- update steps


def _update(bundle: NetworkBundle, groups, lr: float) -> None:
    for g in groups:
        adam_step(bundle.params(g), bundle.adam[g], lr)


def step(state: TrainerState, triplet, phase_hook: Optional[Callable] = None) -> LossReport:
    """One D-update, G-update, F-update round on a sampled triplet.

    Each phase re-runs its own forward pass with fresh dropout masks. The
    detached embeddings from phase 1 are reused in phase 2, which is exact
    because F only changes in phase 3.
    """
    cfg = state.config
    if cfg.variant not in ADVERSARIAL:
        raise ValueError(f"step() handles {ADVERSARIAL}, not {cfg.variant}")
    b = state.bundle
    pooled = cfg.variant == "no_patch"
    use_aux = cfg.variant != "no_aux"
    w = cfg.weights
    xs_np, ys, xt_np = triplet
    xs, xt = Tensor(xs_np), Tensor(xt_np)
    report = LossReport()

    # (1) D-update on real inputs and detached fakes
    b.set_trainable("D")
    with T.no_record():
        emb_s, emb_t = forward_F(b, xs), forward_F(b, xt)
        fake_s = forward_G(b, emb_s, True, state.dropout)
        fake_t = forward_G(b, emb_t, True, state.dropout)
    with Tape():
        p_rs, _ = forward_D(b, xs, heads=("patch",))
        p_fs, a_fs = forward_D(b, fake_s, heads=("patch", "aux") if use_aux else ("patch",))
        p_rt, _ = forward_D(b, xt, heads=("patch",))
        p_ft, _ = forward_D(b, fake_t, heads=("patch",))
        total, rep = loss_D(p_rs, p_fs, p_rt, p_ft, a_fs, ys, pooled, use_aux)
        _check(rep, "D")
        T.backward(total)
    _update(b, "D", cfg.lr_gd)
    report.update(**{k: v for k, v in rep.__dict__.items() if v is not None})
    if phase_hook:
        phase_hook("D")

    # (2) G-update through frozen D
    b.set_trainable("G")
    with Tape():
        fake_s = forward_G(b, emb_s, True, state.dropout)
        fake_t = forward_G(b, emb_t, True, state.dropout)
        p_fs, _ = forward_D(b, fake_s, heads=("patch",))
        p_ft, _ = forward_D(b, fake_t, heads=("patch",))
        total, rep = loss_G(p_fs, p_ft, fake_s, fake_t, xs, xt, pooled)
        _check(rep, "G")
        T.backward(total)
    _update(b, "G", cfg.lr_gd)
    report.update(**{k: v for k, v in rep.__dict__.items() if v is not None})
    if phase_hook:
        phase_hook("G")

    # (3) F-update (with C) through frozen G and D
    b.set_trainable("F", "C")
    with Tape():
        emb_s = forward_F(b, xs)
        logits = forward_C(b, emb_s)
        p_fs = p_ft = a_fs = None
        if w.beta or w.alpha:
            fake_s = forward_G(b, emb_s, True, state.dropout)
            heads = ("patch", "aux") if w.alpha else ("patch",)
            p_fs, a_fs = forward_D(b, fake_s, heads=heads if w.beta else ("aux",))
        if w.beta:
            fake_t = forward_G(b, forward_F(b, xt), True, state.dropout)
            p_ft, _ = forward_D(b, fake_t, heads=("patch",))
        total, rep = loss_F(logits, ys, p_fs, p_ft, a_fs, w, pooled)
        _check(rep, "F")
        T.backward(total)
    _update(b, ("F", "C"), cfg.lr_fc)
    # aux_s stays the D-phase value in the merged row
    report.update(**{k: v for k, v in rep.__dict__.items() if v is not None and k != "aux_s"})
    if phase_hook:
        phase_hook("F")
    b.set_trainable()
    state.iteration += 1
    return report


def step_baseline(state: TrainerState, sample, phase_hook: Optional[Callable] = None) -> LossReport:
    """Supervised F, C update on one labeled image (source-only / target-only)."""
    if state.config.variant not in ("source_only", "target_only"):
        raise ValueError(f"step_baseline() is for baselines, not {state.config.variant}")
    b = state.bundle
    x_np, y = sample
    b.set_trainable("F", "C")
    with Tape():
        logits = forward_C(b, forward_F(b, Tensor(x_np)))
        total, rep = loss_F(logits, y, None, None, None, LossWeights(0.0, 0.0))
        _check(rep, "F")
        T.backward(total)
    _update(b, ("F", "C"), state.config.lr_fc)
    if phase_hook:
        phase_hook("F")
    b.set_trainable()
    state.iteration += 1
    return rep


SRC, TGT = 0, 1


def step_feature_space_d(state: TrainerState, triplet, phase_hook: Optional[Callable] = None) -> LossReport:
    """Global feature-space alignment: a domain classifier on the embedding, F trained with flipped labels."""
    cfg = state.config
    if cfg.variant != "feature_space_d":
        raise ValueError(f"step_feature_space_d() needs the feature_space_d variant, not {cfg.variant}")
    b = state.bundle
    xs_np, ys, xt_np = triplet
    xs, xt = Tensor(xs_np), Tensor(xt_np)
    report = LossReport()

    b.set_trainable("D")
    with T.no_record():
        emb_s, emb_t = forward_F(b, xs), forward_F(b, xt)
    with Tape():
        ls = domain_loss(forward_D_feat(b, emb_s), SRC)
        lt = domain_loss(forward_D_feat(b, emb_t), TGT)
        total = ls + lt
        report.update(adv_D_s=ls.item(), adv_D_t=lt.item())
        report.update(D_total=report.adv_D_s + report.adv_D_t)
        _check(report, "D")
        T.backward(total)
    _update(b, "D", cfg.lr_gd)
    if phase_hook:
        phase_hook("D")

    b.set_trainable("F", "C")
    with Tape():
        emb_s = forward_F(b, xs)
        seg = T.pixelwise_cross_entropy(forward_C(b, emb_s), ys, 255)
        total = seg
        report.update(seg=seg.item())
        if cfg.beta:
            fs = domain_loss(forward_D_feat(b, emb_s), TGT)
            ft = domain_loss(forward_D_feat(b, forward_F(b, xt)), SRC)
            total = seg + cfg.beta * (fs + ft)
            report.update(adv_F_s=fs.item(), adv_F_t=ft.item())
        report.update(F_total=report.seg + cfg.beta * ((report.adv_F_s or 0.0) + (report.adv_F_t or 0.0)))
        _check(report, "F")
        T.backward(total)
    _update(b, ("F", "C"), cfg.lr_fc)
    if phase_hook:
        phase_hook("F")
    b.set_trainable()
    state.iteration += 1
    return report


def _check(report: LossReport, phase: str) -> None:
    try:
        report.check_finite()
    except FloatingPointError as exc:
        raise FloatingPointError(f"{phase}-update aborted: {exc}") from None


def training_views(variant: str, splits):
    """(labeled or unlabeled) datasets each variant is allowed to see."""
    if variant == "target_only":
        return None, splits.target_train
    if variant == "source_only":
        return splits.source_train, None
    return splits.source_train, splits.target_train.unlabeled()


def run_step(state: TrainerState, source, target, phase_hook=None) -> LossReport:
    v = state.config.variant
    if v == "source_only":
        return step_baseline(state, sample_labeled(state, source), phase_hook)
    if v == "target_only":
        return step_baseline(state, sample_labeled(state, target), phase_hook)
    triplet = sample_triplet(state, source, target)
    if v == "feature_space_d":
        return step_feature_space_d(state, triplet, phase_hook)
    return step(state, triplet, phase_hook)


# ---------------------------------------------------------------- checkpoints

_KINDS = ("adversarial", "classifier", "feature_d")


def state_records(state: TrainerState) -> list:
    b, cfg = state.bundle, state.bundle.config
    recs = [
        ("meta.image_size", np.array(cfg.image_size)),
        ("meta.in_channels", np.array(cfg.in_channels)),
        ("meta.num_classes", np.array(cfg.num_classes)),
        ("meta.f_widths", np.array(cfg.f_widths)),
        ("meta.c_width", np.array(cfg.c_width)),
        ("meta.g_widths", np.array(cfg.g_widths)),
        ("meta.d_widths", np.array(cfg.d_widths)),
        ("meta.aux_width", np.array(cfg.aux_width)),
        ("meta.g_dropout", np.array(cfg.g_dropout)),
        ("meta.slope", np.array(cfg.slope)),
        ("meta.kind", np.array(_KINDS.index(cfg.kind))),
        ("meta.variant", np.array(VARIANTS.index(state.config.variant))),
        ("trainer.iteration", np.array(state.iteration)),
    ]
    for name, p in b.params().items():
        recs.append((name, p.data))
    for group, adam in b.adam.items():
        for name in b.params(group):
            if name in adam.m:
                recs.append((f"{name}.adam.m", adam.m[name]))
                recs.append((f"{name}.adam.v", adam.v[name]))
        recs.append((f"{group}.adam.t", np.array(adam.t)))
    recs.append(("rng.sampler", rng_state_words(state.sampler)))
    recs.append(("rng.dropout", rng_state_words(state.dropout)))
    return recs


def save_checkpoint(path, state: TrainerState) -> None:
    write_records(path, state_records(state))


def bundle_config_from_records(recs: dict) -> BundleConfig:
    def ints(name):
        return tuple(int(v) for v in np.atleast_1d(recs[name]))

    return BundleConfig(
        image_size=ints("meta.image_size"), in_channels=ints("meta.in_channels")[0],
        num_classes=ints("meta.num_classes")[0], f_widths=ints("meta.f_widths"),
        c_width=ints("meta.c_width")[0], g_widths=ints("meta.g_widths"), d_widths=ints("meta.d_widths"),
        aux_width=ints("meta.aux_width")[0], g_dropout=float(recs["meta.g_dropout"]),
        slope=float(recs["meta.slope"]), kind=_KINDS[int(recs["meta.kind"])])


def load_checkpoint(path, config: Optional[TrainConfig] = None) -> TrainerState:
    """Rebuild a trainer state (parameters, Adam moments, stream positions)."""
    recs = read_records(path)
    model = bundle_config_from_records(recs)
    variant = VARIANTS[int(recs["meta.variant"])]
    if config is None:
        config = TrainConfig(variant=variant)
    elif config.variant != variant:
        raise ValueError(f"checkpoint holds a {variant} run, config asks for {config.variant}")
    bundle = build_bundle(model, 0)
    for name, p in bundle.params().items():
        if name not in recs:
            raise ValueError(f"checkpoint lacks parameter {name}")
        if recs[name].shape != p.data.shape:
            raise ValueError(f"{name}: checkpoint shape {recs[name].shape} != model shape {p.data.shape}")
        p.data = recs[name].copy()
    for group, adam in bundle.adam.items():
        adam.t = int(recs.get(f"{group}.adam.t", 0))
        for name in bundle.params(group):
            if f"{name}.adam.m" in recs:
                adam.m[name] = recs[f"{name}.adam.m"].copy()
                adam.v[name] = recs[f"{name}.adam.v"].copy()
    return TrainerState(bundle, config, rng_from_words(recs["rng.sampler"]),
                        rng_from_words(recs["rng.dropout"]), int(recs["trainer.iteration"]))


# ---------------------------------------------------------------- training loop


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


METRIC_COLUMNS = ["iteration"] + LossReport.columns()
EVAL_COLUMNS = ["iteration", "source_val_miou", "target_test_miou"]


@dataclass
class TrainResult:
    state: TrainerState
    metrics: list = field(default_factory=list)  # (iteration, LossReport)
    evals: list = field(default_factory=list)  # (iteration, src mIoU, tgt mIoU)
    checkpoint: Optional[Path] = None
    seconds: float = 0.0


def eval_points(iterations: int, interval: int) -> list:
    pts = list(range(interval, iterations + 1, interval))
    if iterations > 0 and (not pts or pts[-1] != iterations):
        pts.append(iterations)
    return pts


def train(config: TrainConfig, splits, out_dir=None, model: BundleConfig = BundleConfig(),
          state: Optional[TrainerState] = None, evaluate_at=None) -> TrainResult:
    """Run ``config.iterations`` steps, evaluating and checkpointing at eval points."""
    t0 = time.perf_counter()
    if state is None:
        model = replace(model, image_size=splits.source_train.size, num_classes=splits.source_train.num_classes)
        state = init_state(config, model)
    source, target = training_views(config.variant, splits)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    points = set(eval_points(config.iterations, config.eval_interval) if evaluate_at is None else evaluate_at)
    result = TrainResult(state)
    while state.iteration < config.iterations:
        rep = run_step(state, source, target)
        result.metrics.append((state.iteration, rep))
        if state.iteration in points:
            src = evaluate(state.bundle, splits.source_val).miou
            tgt = evaluate(state.bundle, splits.target_test).miou
            result.evals.append((state.iteration, src, tgt))
            log.info("%s it %d: source-val mIoU %.4f, target-test mIoU %.4f",
                     config.variant, state.iteration, src or 0.0, tgt or 0.0)
            if out is not None:
                save_checkpoint(out / f"ckpt_{state.iteration:06d}.sgda", state)
    if out is not None:
        write_metrics_csv(out / "metrics.csv", result.metrics)
        write_eval_csv(out / "eval.csv", result.evals)
        result.checkpoint = out / "final.sgda"
        save_checkpoint(result.checkpoint, state)
    result.seconds = time.perf_counter() - t0
    return result


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRIC_COLUMNS)
        for it, rep in metrics:
            wr.writerow([it] + [_fmt(getattr(rep, c)) for c in LossReport.columns()])


def write_eval_csv(path, evals) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(EVAL_COLUMNS)
        for it, s, t in evals:
            wr.writerow([it, _fmt(s), _fmt(t)])


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (float(v) if v != "" else None) for k, v in r.items()} for r in rows]
