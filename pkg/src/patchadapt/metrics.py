"""Confusion matrices and per-class IoU / F1."""
from __future__ import annotations

import numpy as np


def confusion(pred, gt, n_classes: int, ignore: int | None = None) -> np.ndarray:
    """C x C counts, rows = ground truth, columns = prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool) if ignore is None else gt != ignore
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= n_classes or p.min() < 0 or p.max() >= n_classes):
        raise ValueError(f"label values outside [0, {n_classes})")
    return np.bincount(g * n_classes + p, minlength=n_classes ** 2).reshape(n_classes, n_classes)


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """TP / (TP + FP + FN); NaN for a class absent from both maps."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def f1_per_class(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / denom, np.nan)


def mean_defined(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    ok = ~np.isnan(values)
    return float(values[ok].mean()) if ok.any() else float("nan")


def summarize(cm: np.ndarray) -> dict:
    """Per-class IoU/F1 (None where undefined) plus macro means."""
    iou = iou_per_class(cm)
    f1 = f1_per_class(cm)
    return {
        "iou": [None if np.isnan(v) else float(v) for v in iou],
        "f1": [None if np.isnan(v) else float(v) for v in f1],
        "miou": mean_defined(iou),
        "mean_f1": mean_defined(f1),
        "pixels": int(np.asarray(cm).sum()),
    }
