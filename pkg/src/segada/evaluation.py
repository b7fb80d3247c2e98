"""Segmentation scoring (confusion matrix, IoU, mIoU) and cross-domain retrieval."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .networks import NetworkBundle, feature_descriptor, forward_C, forward_F
from .tensor import Tensor

VOID = 255


# ---------------------------------------------------------------- segmentation


def predict(bundle: NetworkBundle, image, factor: int = 1) -> np.ndarray:
    """Per-pixel argmax of C(F(image)), then nearest-neighbour upsampling by ``factor``.

    Ties go to the lowest class id (``np.argmax`` returns the first maximum).
    """
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    with T.no_record():
        logits = forward_C(bundle, forward_F(bundle, x)).data
    pred = np.argmax(logits, axis=0).astype(np.uint8)
    if factor > 1:
        pred = np.repeat(np.repeat(pred, factor, axis=0), factor, axis=1)
    return pred


def downsample_image(image: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter an image by an integer factor (inverse of the label upsampling)."""
    if factor == 1:
        return image
    c, h, w = image.shape
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by factor {factor}")
    return image.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4)).astype(image.dtype)


def accumulate_confusion(pred, gt, num_classes: int, void: int = VOID,
                         matrix: Optional[np.ndarray] = None) -> np.ndarray:
    """Add one prediction/ground-truth pair into a (gt row, pred column) count matrix."""
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    keep = gt != void
    g, p = gt[keep], pred[keep]
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise ValueError(f"ground-truth id outside 0..{num_classes - 1}")
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise ValueError(f"predicted id outside 0..{num_classes - 1}")
    counts = np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    if matrix is None:
        return counts
    matrix += counts
    return matrix


@dataclass
class IoUReport:
    iou: np.ndarray  # per class, NaN where undefined
    defined: np.ndarray  # bool per class
    miou: Optional[float]  # None when no class is evaluable

    @property
    def no_evaluable_pixels(self) -> bool:
        return self.miou is None

    def to_csv(self, class_names: Optional[Sequence[str]] = None) -> str:
        names = class_names or [str(i) for i in range(len(self.iou))]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["class", "iou"])
        for name, v, ok in zip(names, self.iou, self.defined):
            wr.writerow([name, repr(float(v)) if ok else ""])
        wr.writerow(["mIoU", "" if self.miou is None else repr(self.miou)])
        return buf.getvalue()

    def table(self, label: str, class_names: Optional[Sequence[str]] = None) -> str:
        """One-row text table: class columns then mIoU, values in percent."""
        names = list(class_names or [str(i) for i in range(len(self.iou))])
        head = ["method"] + names + ["mIoU"]
        row = [label] + [f"{100 * v:.1f}" if ok else "-" for v, ok in zip(self.iou, self.defined)]
        row.append("-" if self.miou is None else f"{100 * self.miou:.1f}")
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        fmt = " | ".join(f"{{:>{w}}}" for w in widths)
        return fmt.format(*head) + "\n" + fmt.format(*row) + "\n"


def iou_report(matrix: np.ndarray) -> IoUReport:
    m = np.asarray(matrix, dtype=np.int64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or (m < 0).any():
        raise ValueError("confusion matrix must be square with non-negative counts")
    tp = np.diag(m)
    denom = m.sum(axis=0) + m.sum(axis=1) - tp
    defined = denom > 0
    iou = np.full(len(tp), np.nan)
    iou[defined] = tp[defined] / denom[defined]
    miou = float(iou[defined].mean()) if defined.any() else None
    return IoUReport(iou, defined, miou)


def evaluate(bundle: NetworkBundle, dataset, factor: int = 1) -> IoUReport:
    """Predict every image of a labeled dataset and score it against its labels.

    With ``factor > 1`` each image is box-downsampled first and the prediction
    upsampled back to full resolution before scoring.
    """
    n = bundle.config.num_classes
    matrix = np.zeros((n, n), dtype=np.int64)
    labels = dataset.labels
    for img, gt in zip(dataset.images, labels):
        pred = predict(bundle, downsample_image(img, factor), factor)
        accumulate_confusion(pred, gt, n, VOID, matrix)
    return iou_report(matrix)


def evaluate_third_domain(bundle: NetworkBundle, dataset) -> IoUReport:
    if getattr(dataset, "domain", "third") != "third":
        raise ValueError(f"expected the third-domain split, got {dataset.domain}")
    return evaluate(bundle, dataset)


# ---------------------------------------------------------------- retrieval


@dataclass
class RetrievalResult:
    ks: list
    a_k: list  # mean #target items in top-k, over source queries
    b_k: list  # mean #source items in top-k, over target queries
    map_s2t: float
    map_t2s: float
    n_src: int
    n_tgt: int
    n_query_s: int
    n_query_t: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["k", "A_k", "B_k"])
        for k, a, b in zip(self.ks, self.a_k, self.b_k):
            wr.writerow([k, repr(a), repr(b)])
        return buf.getvalue()


def _unit(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0).any():
        raise ValueError(f"zero-norm descriptor in {what} (row {int(np.argmax(norms == 0))})")
    return x / norms[:, None]


def rank_pool(queries: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Pool indices per query, by descending cosine similarity, ties by lower index.

    Similarities are rounded to 12 decimals so that rescaling a descriptor,
    which perturbs the normalised value in the last bits, cannot reorder ties.
    """
    sims = np.round(_unit(queries, "queries") @ _unit(pool, "pool").T, 12)
    return np.argsort(-sims, axis=1, kind="stable")


def average_precision(relevant_sorted: np.ndarray) -> float:
    """Mean of precision@rank over the ranks holding relevant items."""
    hits = np.flatnonzero(relevant_sorted)
    if hits.size == 0:
        return 0.0
    return float(np.mean((np.arange(1, hits.size + 1)) / (hits + 1)))


def cross_domain_retrieval(pool: np.ndarray, pool_is_target, queries_s: np.ndarray, queries_t: np.ndarray,
                           ks: Sequence[int], pool_ids=None, query_ids_s=None, query_ids_t=None) -> RetrievalResult:
    """k-NN counts of opposite-domain items and mAP with opposite-domain relevance."""
    pool_is_target = np.asarray(pool_is_target, dtype=bool)
    if len(pool_is_target) != len(pool):
        raise ValueError("one domain flag per pool descriptor is required")
    if pool_ids is not None:
        overlap = set(np.asarray(pool_ids).tolist()) & (
            set(np.asarray(query_ids_s if query_ids_s is not None else []).tolist())
            | set(np.asarray(query_ids_t if query_ids_t is not None else []).tolist()))
        if overlap:
            raise ValueError(f"queries overlap the pool: {sorted(overlap)[:5]}")
    ks = [int(k) for k in ks]
    if any(k < 1 or k > len(pool) for k in ks):
        raise ValueError(f"k values must lie in 1..{len(pool)}")

    def one_direction(queries, want_target):
        order = rank_pool(queries, pool)
        rel = pool_is_target[order] == want_target
        cum = np.cumsum(rel, axis=1)
        counts = [float(cum[:, k - 1].mean()) for k in ks]
        m_ap = float(np.mean([average_precision(r) for r in rel])) if len(rel) else 0.0
        return counts, m_ap

    a_k, map_s = one_direction(queries_s, True)
    b_k, map_t = one_direction(queries_t, False)
    return RetrievalResult(ks, a_k, b_k, map_s, map_t, int((~pool_is_target).sum()), int(pool_is_target.sum()),
                           len(queries_s), len(queries_t))


def _descriptors(bundle, images) -> np.ndarray:
    return np.stack([feature_descriptor(bundle, img) for img in images]) if len(images) else np.zeros((0, 1))


def retrieval_sets(splits, pool_per_domain: int, queries_per_domain: int):
    """Pool from the two training splits, queries from held-out splits, so they are disjoint."""
    need = {"source_train": pool_per_domain, "target_train": pool_per_domain,
            "source_val": queries_per_domain, "target_test": queries_per_domain}
    for name, n in need.items():
        if len(getattr(splits, name)) < n:
            raise ValueError(f"split {name} has {len(getattr(splits, name))} samples, retrieval needs {n}")
    P, Q = pool_per_domain, queries_per_domain
    pool_imgs = np.concatenate([splits.source_train.images[:P], splits.target_train.images[:P]])
    is_target = np.r_[np.zeros(P, bool), np.ones(P, bool)]

    def ids(name, n):
        seeds = getattr(splits, name).seeds
        return None if seeds is None else seeds[:n]

    pool_ids = None
    if all(ids(n, 1) is not None for n in need):
        pool_ids = np.r_[ids("source_train", P), ids("target_train", P)]
    return (pool_imgs, is_target, splits.source_val.images[:Q], splits.target_test.images[:Q],
            pool_ids, ids("source_val", Q), ids("target_test", Q))


def run_retrieval(bundle, sets, ks):
    pool_imgs, is_target, qs, qt, pool_ids, ids_s, ids_t = sets
    return cross_domain_retrieval(_descriptors(bundle, pool_imgs), is_target, _descriptors(bundle, qs),
                                  _descriptors(bundle, qt), ks, pool_ids, ids_s, ids_t)
