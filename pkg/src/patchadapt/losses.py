"""Segmentation loss, adversarial domain loss and the min-max assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PROB_EPS = 1e-7


@dataclass
class ObjectiveConfig:
    lam: float = 0.1
    reduction: str = "mean"
    label_smoothing: bool = False

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


def seg_loss(logits: Tensor, labels, ignore_index: int | None = None,
             reduction: str = "mean") -> Tensor:
    """Pixel-wise cross-entropy of softmax(logits) against integer labels.

    ``mean`` divides the summed loss by the number of non-ignored pixels.
    """
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(
            f"label values must lie in [0, {c}) or equal ignore_index; "
            f"found {np.unique(labels[bad]).tolist()}"
        )
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    ni, hi, wi = np.nonzero(valid)
    onehot[ni, labels[valid].astype(np.intp), hi, wi] = 1.0
    total = -(dc.log_softmax(logits, axis=1) * onehot).sum()
    if reduction == "sum":
        return total
    count = int(valid.sum())
    return total * (1.0 / max(count, 1))


def _bce_side(d_out: Tensor, label: float) -> Tensor:
    p = dc.clip(d_out, PROB_EPS, 1.0 - PROB_EPS)
    # mean over batch and locations == per-patch 1/(HW) average, then batch mean
    terms = []
    if label:
        terms.append(dc.log(p).mean() * label)
    if 1.0 - label:
        terms.append(dc.log(1.0 - p).mean() * (1.0 - label))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return -out


def adv_loss(d_out_source: Tensor, d_out_target: Tensor,
             source_label: float = 1.0, target_label: float = 0.0) -> Tensor:
    """Binary domain cross-entropy over every output location, batch-averaged.

    The same function serves feature-level and entropy-level classifiers.
    """
    return _bce_side(d_out_source, source_label) + _bce_side(d_out_target, target_label)


def assemble_objective(seg: Tensor, adv: Tensor | None, lam: float, role: str,
                       reversed_input: bool = True) -> Tensor:
    """Combine the losses for one optimisation role.

    ``generator`` with ``reversed_input`` expects ``adv`` to have been computed
    on classifier inputs routed through ``grad_reverse(., lam)``, so a single
    backward pass gives the classifier d(adv) and the segmenter
    d(seg) - lam * d(adv). Without reversal the generator objective is
    ``seg - lam * adv`` and only the segmenter parameters should be stepped.
    """
    if not np.isfinite(lam) or lam < 0:
        raise ValueError(f"lambda must be finite and >= 0, got {lam}")
    if role == "discriminator":
        if adv is None:
            raise ValueError("discriminator role needs an adversarial loss")
        return adv
    if role != "generator":
        raise ValueError(f"unknown role {role!r}")
    if adv is None:
        return seg
    if reversed_input:
        return seg + adv
    return seg - adv * lam
