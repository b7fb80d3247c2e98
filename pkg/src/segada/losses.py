"""Loss algebra for the three update phases.

Adversarial terms are 4-way pixelwise cross-entropies over the patch
discriminator's domain classes. Which parameters a term trains is decided by
the caller freezing groups, not here; these functions only compose values.

    D_total = adv_D_s + adv_D_t + aux_s
    G_total = adv_G_s + adv_G_t + rec_s + rec_t
    F_total = seg + alpha * aux_s + beta * (adv_F_s + adv_F_t)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .networks import DomainClass
from .tensor import Tensor

VOID = 255


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")


@dataclass
class LossReport:
    seg: Optional[float] = None
    aux_s: Optional[float] = None
    rec_s: Optional[float] = None
    rec_t: Optional[float] = None
    adv_D_s: Optional[float] = None
    adv_D_t: Optional[float] = None
    adv_G_s: Optional[float] = None
    adv_G_t: Optional[float] = None
    adv_F_s: Optional[float] = None
    adv_F_t: Optional[float] = None
    D_total: Optional[float] = None
    G_total: Optional[float] = None
    F_total: Optional[float] = None

    @classmethod
    def columns(cls) -> list:
        return [f.name for f in fields(cls)]

    def update(self, **values) -> "LossReport":
        for k, v in values.items():
            setattr(self, k, None if v is None else float(v))
        return self

    def check_finite(self) -> None:
        for name in self.columns():
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise FloatingPointError(f"loss term {name} is not finite ({v})")


def adv_patch_loss(patch_logits: Tensor, target: int, pooled: bool = False) -> Tensor:
    """Cross-entropy of every patch position against one domain class.

    With ``pooled`` the patch map is averaged to a single 4-way prediction
    first, which turns the patch discriminator into a global one.
    """
    if patch_logits.shape[0] != 4:
        raise ValueError(f"patch logits need 4 channels, got {patch_logits.shape[0]}")
    if pooled:
        patch_logits = T.reshape(T.global_avg_pool(patch_logits), (4, 1, 1))
    h, w = patch_logits.shape[1:]
    return T.pixelwise_cross_entropy(patch_logits, np.full((h, w), target, dtype=np.int64), ignore_id=-1)


def domain_loss(logits: Tensor, target: int) -> Tensor:
    """Cross-entropy of a flat vector of class logits against ``target``."""
    n = logits.shape[0]
    return T.pixelwise_cross_entropy(T.reshape(logits, (n, 1, 1)), np.full((1, 1), target), ignore_id=-1)


def _total(*terms) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def loss_D(patch_real_s, patch_fake_s, patch_real_t, patch_fake_t, aux_fake_s, labels_s,
           pooled: bool = False, use_aux: bool = True):
    """Discriminator objective. Returns ``(D_total tensor, LossReport)``."""
    if use_aux and labels_s is None:
        raise ValueError("loss_D needs source labels for the auxiliary term")
    adv_s = adv_patch_loss(patch_real_s, DomainClass.SRC_REAL, pooled) + \
        adv_patch_loss(patch_fake_s, DomainClass.SRC_FAKE, pooled)
    adv_t = adv_patch_loss(patch_real_t, DomainClass.TGT_REAL, pooled) + \
        adv_patch_loss(patch_fake_t, DomainClass.TGT_FAKE, pooled)
    terms = [adv_s, adv_t]
    aux = None
    if use_aux:
        aux = T.pixelwise_cross_entropy(aux_fake_s, labels_s, VOID)
        terms.append(aux)
    total = _total(*terms)
    report = LossReport().update(adv_D_s=adv_s.item(), adv_D_t=adv_t.item(),
                                 aux_s=None if aux is None else aux.item())
    report.update(D_total=report.adv_D_s + report.adv_D_t + (report.aux_s or 0.0))
    return total, report


def loss_G(patch_fake_s, patch_fake_t, recon_s, recon_t, image_s, image_t, pooled: bool = False):
    """Generator objective: fool D within each domain and reconstruct the input."""
    adv_s = adv_patch_loss(patch_fake_s, DomainClass.SRC_REAL, pooled)
    adv_t = adv_patch_loss(patch_fake_t, DomainClass.TGT_REAL, pooled)
    rec_s = T.l1_loss(recon_s, image_s)
    rec_t = T.l1_loss(recon_t, image_t)
    total = _total(adv_s, adv_t, rec_s, rec_t)
    report = LossReport().update(adv_G_s=adv_s.item(), adv_G_t=adv_t.item(), rec_s=rec_s.item(),
                                 rec_t=rec_t.item())
    report.update(G_total=report.adv_G_s + report.adv_G_t + report.rec_s + report.rec_t)
    return total, report


def loss_F(seg_logits, labels_s, patch_fake_s, patch_fake_t, aux_fake_s, weights: LossWeights,
           pooled: bool = False):
    """Embedding objective with the cross-domain (domain-swapped) adversarial targets.

    Terms whose weight is zero are left out of the returned tensor so they add
    no gradient at all; they are still reported when their inputs are given.
    """
    seg = T.pixelwise_cross_entropy(seg_logits, labels_s, VOID)
    total = seg
    report = LossReport().update(seg=seg.item())
    if aux_fake_s is not None:
        aux = T.pixelwise_cross_entropy(aux_fake_s, labels_s, VOID)
        report.update(aux_s=aux.item())
        if weights.alpha:
            total = total + weights.alpha * aux
    if patch_fake_s is not None and patch_fake_t is not None:
        adv_s = adv_patch_loss(patch_fake_s, DomainClass.TGT_REAL, pooled)
        adv_t = adv_patch_loss(patch_fake_t, DomainClass.SRC_REAL, pooled)
        report.update(adv_F_s=adv_s.item(), adv_F_t=adv_t.item())
        if weights.beta:
            total = total + weights.beta * (adv_s + adv_t)
    f_total = report.seg + weights.alpha * (report.aux_s or 0.0) + \
        weights.beta * ((report.adv_F_s or 0.0) + (report.adv_F_t or 0.0))
    report.update(F_total=f_total)
    return total, report
