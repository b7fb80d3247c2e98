"""Acceptance suite: one PASS/FAIL line per criterion, printed at the end of the run.

Criteria 4 to 8 share one three-seed training protocol (about 45 minutes on
one core), run once per session.
"""

import time

import numpy as np
import pytest

from segada import tensor as T
from segada.checkpoint import read_records, write_records
from segada.data import DataConfig, make_splits, read_dataset, write_dataset
from segada.evaluation import accumulate_confusion, cross_domain_retrieval, iou_report, rank_pool
from segada.experiments import median_over_seeds, moving_average, run_protocol
from segada.losses import adv_patch_loss
from segada.networks import BundleConfig, build_bundle, forward_C, forward_D, forward_F, forward_G
from segada.tensor import Tensor
from segada.trainer import (TrainConfig, init_state, load_checkpoint, run_step, step, step_baseline, train,
                            training_views)

from conftest import check_grads, record_criterion
from test_evaluation import brute_iou, brute_retrieval
from test_trainer import PhaseAudit

SEEDS = (0, 1, 2)
MARGIN = 0.03  # three mIoU points
RETRIEVAL_K = 50
TIME_BUDGET_S = 45 * 60


# ---------------------------------------------------------------- 1. gradients


def _op_cases(r, dtype):
    def t(shape, lo=None):
        a = r.standard_normal(shape)
        if lo is not None:
            a = np.where(np.abs(a) < lo, a + np.sign(a + 1e-12) * lo, a)  # keep clear of kinks
        return Tensor(a.astype(dtype))

    x, y = t((2, 4, 4)), t((2, 4, 4))
    xk = t((2, 4, 4), lo=0.05)
    w3, w1, b = t((3, 2, 3, 3)), t((3, 2, 1, 1)), t((3,))
    proj = r.standard_normal((3, 8, 8))
    labels = r.integers(0, 3, (4, 4))
    labels[0, 0] = 255

    def dot(v, p):
        c, h, w = v.shape
        k = Tensor(np.asarray(p, dtype).reshape(1, c * h * w, 1, 1))
        return T.reshape(T.conv2d(T.reshape(v, (c * h * w, 1, 1)), k, None), ())

    p2 = r.standard_normal((2, 4, 4))
    seed = int(r.integers(1 << 30))
    cases = {
        "add": (lambda: dot(x + y, p2), [x, y]),
        "scale": (lambda: dot(x * 1.7, p2), [x]),
        "sum": (lambda: T.sum_(T.tanh(x)), [x]),
        "mean": (lambda: T.mean(T.tanh(x)), [x]),
        "reshape": (lambda: dot(T.reshape(T.reshape(x, (4, 8)), (2, 4, 4)), p2), [x]),
        "relu": (lambda: dot(T.relu(xk), p2), [xk]),
        "leaky_relu": (lambda: dot(T.leaky_relu(xk, 0.2), p2), [xk]),
        "tanh": (lambda: dot(T.tanh(x), p2), [x]),
        "dropout": (lambda: dot(T.dropout(x, 0.5, True, np.random.default_rng(seed)), p2), [x]),
        "conv3_s1": (lambda: dot(T.conv2d(x, w3, b, 1, 1), proj[:, :4, :4]), [x, w3, b]),
        "conv3_s2": (lambda: dot(T.conv2d(x, w3, b, 2, 1), proj[:, :2, :2]), [x, w3, b]),
        "conv1": (lambda: dot(T.conv2d(x, w1, b), proj[:, :4, :4]), [x, w1, b]),
        "upsample_nearest": (lambda: dot(T.upsample(x, 2, "nearest"), proj[:2]), [x]),
        "upsample_bilinear": (lambda: dot(T.upsample(x, 2, "bilinear"), proj[:2]), [x]),
        "global_avg_pool": (lambda: T.sum_(T.tanh(T.global_avg_pool(x))), [x]),
        "cross_entropy": (lambda: T.pixelwise_cross_entropy(T.conv2d(x, w1, b), labels), [x, w1, b]),
        "l1": (lambda: T.l1_loss(x, y), [x, y]),
    }
    return {k: (fn, leaves, leaves) for k, (fn, leaves) in cases.items()}


TINY = BundleConfig(image_size=(8, 8), f_widths=(4, 4, 4), c_width=4, g_widths=(4, 4, 4), d_widths=(4, 4, 4),
                    aux_width=4, num_classes=3)


def _path_cases(seed, dtype):
    b = build_bundle(TINY, seed, dtype=dtype)
    r = np.random.default_rng(seed)
    x = Tensor(r.uniform(-1, 1, (3, 8, 8)).astype(dtype))
    labels = r.integers(0, 3, (8, 8))
    P = b.params()
    # zero biases plus dropout put pre-activations exactly on the relu kink; move them off it
    for name, p in P.items():
        if name.endswith("bias"):
            p.data[...] = (0.1 * r.standard_normal(p.data.shape)).astype(dtype)

    def g_of_f():
        return forward_G(b, forward_F(b, x), True, np.random.default_rng(seed))

    def d_g_f():
        patch, aux = forward_D(b, g_of_f())
        return adv_patch_loss(patch, 2) + T.pixelwise_cross_entropy(aux, labels)

    def pick(*names):
        return [P[n] for n in names]

    every = list(P.values()) + [x]
    return {
        "C∘F": (lambda: T.pixelwise_cross_entropy(forward_C(b, forward_F(b, x)), labels),
                pick("F.0.weight", "F.4.bias", "C.1.weight", "C.0.bias") + [x], every),
        "G∘F": (lambda: T.l1_loss(g_of_f(), Tensor(np.full((3, 8, 8), 0.1, dtype))) + T.mean(T.tanh(g_of_f())),
                pick("F.2.weight", "G.1.weight", "G.6.bias") + [x], every),
        "D∘G∘F": (d_g_f, pick("F.0.weight", "G.3.weight", "D.trunk.0.weight", "D.patch.0.weight",
                              "D.aux.1.bias") + [x], every),
    }


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst = {np.float32: 0.0, np.float64: 0.0}
    where = {}
    for seed in range(20):
        r = np.random.default_rng(seed)
        for dtype in (np.float64, np.float32):
            cases = {**_op_cases(r, dtype), **_path_cases(seed, dtype)}
            for name, (fn, leaves, reads) in cases.items():
                # 32-bit gradients are compared with 64-bit differences of the same function
                err = check_grads(fn, leaves, dtype, coords=12, rng=np.random.default_rng(seed),
                                  upcast=reads if dtype == np.float32 else None)
                if err > worst[dtype]:
                    worst[dtype], where[dtype] = err, f"{name} seed {seed}"
    elapsed = time.perf_counter() - t0
    ok = worst[np.float32] < 1e-3 and worst[np.float64] < 1e-6 and elapsed < 60
    record_criterion(1, ok, f"gradient checks over 20 seeds: worst rel err 64-bit {worst[np.float64]:.2e} "
                            f"({where.get(np.float64)}), 32-bit {worst[np.float32]:.2e} ({where.get(np.float32)}); "
                            f"{elapsed:.1f} s (limits 1e-6, 1e-3, 60 s)")
    assert ok


# ---------------------------------------------------------------- 2. routing


def test_criterion_2_routing():
    t0 = time.perf_counter()
    splits = make_splits(DataConfig(seed=5, n_source_train=20, n_source_val=0, n_target_train=20, n_target_test=0,
                                    n_third_test=0))
    state = init_state(TrainConfig(variant="full", seed=5))
    audit = PhaseAudit(state.bundle)
    src, tgt = training_views("full", splits)
    for _ in range(50):
        run_step(state, src, tgt, audit)
    expected = {"D": {"D"}, "G": {"G"}, "F": {"F", "C"}}
    bad = [(i, p, c) for i, (p, c) in enumerate(audit.changes) if c != expected[p]]
    routed = not bad and len(audit.changes) == 150

    full = init_state(TrainConfig(variant="full", alpha=0.0, beta=0.0, seed=6))
    base = init_state(TrainConfig(variant="source_only", seed=6))
    same = True
    for i in range(10):
        xs, ys = splits.source_train.images[i], splits.source_train.labels[i]
        step(full, (xs, ys, splits.target_train.images[i]))
        step_baseline(base, (xs, ys))
        same &= all(p.data.tobytes() == full.bundle.params()[n].data.tobytes()
                    for n, p in base.bundle.params().items())
    elapsed = time.perf_counter() - t0
    ok = routed and same and elapsed < 120
    record_criterion(2, ok, f"50 steps, 150 phases, {len(bad)} routing violations; zero-weight F-phase bitwise "
                            f"equal to supervised step: {same}; {elapsed:.1f} s (limit 120 s)")
    assert ok


# ---------------------------------------------------------------- 3. oracles


def test_criterion_3_oracle_equivalence():
    t0 = time.perf_counter()
    r = np.random.default_rng(3)
    iou_ok = True
    for _ in range(200):
        gt = r.integers(0, 5, (8, 8))
        gt[r.random((8, 8)) < 0.1] = 255
        pred = r.integers(0, 5, (8, 8))
        rep = iou_report(accumulate_confusion(pred, gt, 5))
        oracle = brute_iou(pred, gt, 5)
        defined = [v for v in oracle if v is not None]
        iou_ok &= all((o is None and not d) or (o is not None and d and v == o)
                      for o, v, d in zip(oracle, rep.iou, rep.defined))
        iou_ok &= rep.miou == np.mean(defined)
    ret_ok = True
    for trial in range(40):
        n = int(r.integers(2, 65))
        pool = r.standard_normal((n, 6))
        if trial % 4 == 0:
            pool[::3] = pool[0]
        is_t = r.random(n) < 0.5
        qs, qt = r.standard_normal((6, 6)), r.standard_normal((6, 6))
        ks = sorted({1, n, int(r.integers(1, n + 1))})
        res = cross_domain_retrieval(pool, is_t, qs, qt, ks)
        a_k, map_s, lists_s = brute_retrieval(pool, is_t, qs, True, ks)
        b_k, map_t, lists_t = brute_retrieval(pool, is_t, qt, False, ks)
        ret_ok &= rank_pool(qs, pool).tolist() == lists_s and rank_pool(qt, pool).tolist() == lists_t
        ret_ok &= res.a_k == a_k and res.b_k == b_k
        ret_ok &= abs(res.map_s2t - map_s) <= 1e-15 and abs(res.map_t2s - map_t) <= 1e-15
    elapsed = time.perf_counter() - t0
    ok = iou_ok and ret_ok and elapsed < 30
    record_criterion(3, ok, f"IoU exact on 200 map pairs: {iou_ok}; retrieval lists/counts/mAP exact on 40 pools "
                            f"(n<=64): {ret_ok}; {elapsed:.1f} s (limit 30 s)")
    assert ok


# ---------------------------------------------------------------- 4-8. desk-scale protocol


@pytest.fixture(scope="module")
def protocol():
    return run_protocol(["full", "source_only", "target_only", "feature_space_d"], SEEDS,
                        retrieval_k=(RETRIEVAL_K,))


def _median(records, variant, getter):
    return median_over_seeds(records, variant, getter)


def test_criterion_4_adaptation(protocol):
    tgt = {v: _median(protocol, v, lambda r: r.target_miou) for v in ("full", "source_only", "target_only")}
    seconds = sum(r.seconds for (v, _), r in protocol.items() if v in tgt)
    per_seed = {v: [round(100 * protocol[(v, s)].target_miou, 1) for s in SEEDS] for v in tgt}
    ok = (tgt["full"] >= tgt["source_only"] + MARGIN and tgt["target_only"] >= tgt["full"]
          and seconds <= TIME_BUDGET_S)
    record_criterion(4, ok, f"median target mIoU full {100 * tgt['full']:.1f} vs source-only "
                            f"{100 * tgt['source_only']:.1f} (need +3.0) and target-only {100 * tgt['target_only']:.1f} "
                            f"(need >= full); per seed {per_seed}; {seconds / 60:.1f} min (limit 45)")
    assert ok


def test_criterion_5_ablation_direction(protocol):
    tgt = {v: _median(protocol, v, lambda r: r.target_miou) for v in ("full", "feature_space_d", "source_only")}
    ok = tgt["full"] > tgt["feature_space_d"] and tgt["full"] > tgt["source_only"]
    record_criterion(5, ok, "median target mIoU full {:.1f} > feature-space D {:.1f} and > source-only {:.1f}".format(
        *(100 * tgt[v] for v in ("full", "feature_space_d", "source_only"))))
    assert ok


def test_criterion_6_retrieval(protocol):
    a = {v: _median(protocol, v, lambda r: r.retrieval.a_k[0]) for v in ("full", "source_only")}
    b = {v: _median(protocol, v, lambda r: r.retrieval.b_k[0]) for v in ("full", "source_only")}
    ok = a["full"] > a["source_only"] and b["full"] > b["source_only"]
    record_criterion(6, ok, f"k={RETRIEVAL_K}, pool 200+200: |A_k| adapted {a['full']:.2f} vs source-only "
                            f"{a['source_only']:.2f}; |B_k| adapted {b['full']:.2f} vs source-only {b['source_only']:.2f}")
    assert ok


def test_criterion_7_generator_learning(protocol):
    ratios, lo, hi = [], np.inf, -np.inf
    for s in SEEDS:
        rec = protocol[("full", s)]
        ratios.append(moving_average(rec.rec_curve, 4500) / moving_average(rec.rec_curve, 500))
        lo, hi = min(lo, rec.g_range[0]), max(hi, rec.g_range[1])
    ok = all(q < 0.5 for q in ratios) and lo >= -1.0 and hi <= 1.0
    record_criterion(7, ok, f"rec moving average ratio (4500 / 500) per seed {[round(q, 3) for q in ratios]} "
                            f"(need < 0.5); G output range [{lo:.4f}, {hi:.4f}]")
    assert ok


def test_criterion_8_third_domain(protocol):
    third = {v: _median(protocol, v, lambda r: r.third_miou) for v in ("full", "source_only")}
    ok = third["full"] > third["source_only"]
    record_criterion(8, ok, f"median third-domain mIoU adapted {100 * third['full']:.1f} vs source-only "
                            f"{100 * third['source_only']:.1f}")
    assert ok


# ---------------------------------------------------------------- 9. determinism and persistence


def test_criterion_9_determinism_and_persistence(tmp_path):
    splits = make_splits(DataConfig(seed=9, n_source_train=16, n_source_val=4, n_target_train=16, n_target_test=4,
                                    n_third_test=2))
    cfg = TrainConfig(iterations=20, eval_interval=10, seed=9)
    train(cfg, splits, tmp_path / "a")
    train(cfg, splits, tmp_path / "b")
    csv_same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                   for f in ("metrics.csv", "eval.csv"))

    resumed = train(cfg, splits, tmp_path / "c", state=load_checkpoint(tmp_path / "a" / "ckpt_000010.sgda", cfg))
    resume_same = (tmp_path / "a" / "final.sgda").read_bytes() == (tmp_path / "c" / "final.sgda").read_bytes()
    resume_same &= resumed.state.iteration == 20

    write_dataset(tmp_path / "d.sgds", splits.source_train)
    back = read_dataset(tmp_path / "d.sgds")
    data_same = back.images_u8.tobytes() == splits.source_train.images_u8.tobytes() and \
        back.labels.tobytes() == splits.source_train.labels.tobytes()

    recs = read_records(tmp_path / "a" / "final.sgda")
    write_records(tmp_path / "e.sgda", list(recs.items()))
    ckpt_same = (tmp_path / "e.sgda").read_bytes() == (tmp_path / "a" / "final.sgda").read_bytes()
    ok = csv_same and resume_same and data_same and ckpt_same
    record_criterion(9, ok, f"identical CSVs {csv_same}; resume bitwise {resume_same}; dataset round trip "
                            f"{data_same}; checkpoint round trip {ckpt_same}")
    assert ok


# ---------------------------------------------------------------- 10. leakage


def test_criterion_10_no_target_label_leakage():
    variants = ("full", "no_aux", "no_patch", "feature_space_d", "source_only")
    results = {}
    for variant in variants:
        runs = []
        for scramble in (False, True):
            sp = make_splits(DataConfig(seed=10, n_source_train=8, n_source_val=0, n_target_train=8, n_target_test=0,
                                        n_third_test=0))
            if scramble:
                sp.target_train._labels = np.random.default_rng(1).integers(0, 5, sp.target_train._labels.shape) \
                    .astype(np.uint8)
            res = train(TrainConfig(variant=variant, iterations=5, seed=10), sp, evaluate_at=[])
            runs.append((sp.target_train.label_reads,
                         {n: p.data.tobytes() for n, p in res.state.bundle.params().items()}))
        results[variant] = runs[0][0] == 0 and runs[1][0] == 0 and runs[0][1] == runs[1][1]
    ok = all(results.values())
    record_criterion(10, ok, "target-train labels unread and irrelevant (scrambled labels give bitwise identical "
                             f"parameters) for {', '.join(v for v in variants if results[v])}")
    assert ok
