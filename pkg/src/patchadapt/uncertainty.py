"""Entropy maps, patch difficulty scores, easy/hard split and pseudo-labels."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

IGNORE_INDEX = 255


@dataclass
class EntropyMap:
    values: Tensor  # N x C x H x W, elements -p ln p
    logits: Tensor


@dataclass(frozen=True)
class PatchScore:
    patch_id: str
    score: float
    rank: int
    bucket: str


@dataclass
class PseudoLabel:
    patch_id: str
    labels: np.ndarray
    checkpoint_id: str


def entropy_map(logits: Tensor) -> EntropyMap:
    """Per-class entropy terms of the channel softmax, differentiable.

    Uses p * log_softmax so a probability that underflows to 0 contributes 0.
    """
    p = dc.softmax(logits, axis=1)
    logp = dc.log_softmax(logits, axis=1)
    return EntropyMap(values=-(p * logp), logits=logits)


def uncertainty_score(m: EntropyMap) -> float:
    """Mean of the entropy map over H, W and C for a single patch."""
    if m.values.shape[0] != 1:
        raise ValueError(f"expected a single patch, got batch of {m.values.shape[0]}")
    return float(m.values.data.mean())


def uncertainty_scores(m: EntropyMap) -> np.ndarray:
    """Per-patch scores for a batched entropy map."""
    return m.values.data.reshape(m.values.shape[0], -1).mean(axis=1)


def rank_and_split(scores, gamma: float) -> tuple[list[str], list[str]]:
    """Sort ascending by score (ties by input order); first floor(gamma*n) are easy.

    ``scores`` is a sequence of (patch_id, m) pairs or a mapping id -> m.
    """
    ranked = rank_scores(scores, gamma)
    easy = [r.patch_id for r in ranked if r.bucket == "easy"]
    hard = [r.patch_id for r in ranked if r.bucket == "hard"]
    return easy, hard


def rank_scores(scores, gamma: float) -> list[PatchScore]:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    items = list(scores.items()) if isinstance(scores, Mapping) else [tuple(s) for s in scores]
    ids = [str(i) for i, _ in items]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patch ids in score list")
    values = [float(v) for _, v in items]
    if not all(math.isfinite(v) for v in values):
        raise ValueError("scores must be finite")
    order = sorted(range(len(items)), key=lambda i: (values[i], i))
    n_easy = math.floor(round(gamma * len(items), 9))
    return [
        PatchScore(ids[i], values[i], rank, "easy" if rank < n_easy else "hard")
        for rank, i in enumerate(order)
    ]


def score_patches(seg_net, samples: Sequence, batch_size: int = 32) -> list[tuple[str, float]]:
    from .nets import forward_seg

    out = []
    with dc.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = np.stack([s.image for s in chunk]).astype(seg_net.head.weight.dtype)
            _, logits = forward_seg(seg_net, Tensor(x))
            m = uncertainty_scores(entropy_map(logits))
            out.extend((s.id, float(v)) for s, v in zip(chunk, m))
    return out


def write_split_manifest(ranked: Iterable[PatchScore], path) -> None:
    lines = [f"{r.patch_id}\t{r.score:.15e}\t{r.bucket}\n" for r in ranked]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_split_manifest(path) -> list[PatchScore]:
    ranked = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("easy", "hard"):
            raise ValueError(f"{path}:{lineno}: malformed split record {line!r}")
        ranked.append(PatchScore(parts[0], float(parts[1]), len(ranked), parts[2]))
    return ranked


def generate_pseudo_labels(bundle, patches: Sequence, threshold: float | None = None,
                           batch_size: int = 32) -> list[PseudoLabel]:
    """Argmax of the adapted model's softmax for each patch.

    With ``threshold`` set, pixels whose top probability is below it become
    IGNORE_INDEX. Off by default.
    """
    from .nets import forward_seg

    if bundle is None:
        raise ValueError("pseudo-labelling needs an adapted checkpoint, got None")
    ckpt = f"{bundle.stage}#{bundle.stage_index}:{bundle.fingerprint()}"
    out = []
    with dc.no_grad():
        for start in range(0, len(patches), batch_size):
            chunk = patches[start:start + batch_size]
            x = np.stack([p.image for p in chunk]).astype(bundle.seg.head.weight.dtype)
            _, logits = forward_seg(bundle.seg, Tensor(x))
            probs = dc.softmax(logits, axis=1).data
            labels = dc.argmax(probs, axis=1)
            if threshold is not None:
                labels = np.where(probs.max(axis=1) >= threshold, labels, IGNORE_INDEX)
            for p, lab in zip(chunk, labels):
                out.append(PseudoLabel(p.id, lab.astype(np.uint8), ckpt))
    return out
