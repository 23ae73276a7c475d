"""Confusion-matrix accumulation and segmentation accuracy metrics.

Rows index the truth class, columns the prediction. Matrices merge by
addition, so per-tile accumulation followed by a merge equals scoring the
concatenated rasters. Classes absent from both truth and prediction are
excluded from the mean IoU (their per-class IoU is reported as NaN).
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractError, ShapeError

__all__ = ["confusion", "merge", "metrics"]


def confusion(pred: np.ndarray, truth: np.ndarray, classes: int) -> np.ndarray:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        return np.zeros((classes, classes), dtype=np.int64)
    p = pred.reshape(-1).astype(np.int64)
    t = truth.reshape(-1).astype(np.int64)
    if p.min() < 0 or p.max() >= classes or t.min() < 0 or t.max() >= classes:
        raise ContractError(f"class index outside [0, {classes})")
    return np.bincount(t * classes + p, minlength=classes * classes).reshape(classes, classes)


def merge(*cms: np.ndarray) -> np.ndarray:
    out = np.zeros_like(cms[0])
    for cm in cms:
        out = out + cm
    return out


def metrics(cm: np.ndarray) -> dict:
    """Overall accuracy, mean and frequency-weighted IoU, Cohen's kappa, and
    per-class IoU from one confusion matrix."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ContractError("empty confusion matrix")
    diag = np.diag(cm)
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    union = rows + cols - diag
    present = union > 0

    iou = np.full(cm.shape[0], np.nan)
    iou[present] = diag[present] / union[present]
    oa = diag.sum() / total
    miou = float(iou[present].mean()) if present.any() else 0.0
    fwiou = float(((rows[present] / total) * iou[present]).sum())
    pe = float((rows * cols).sum() / (total * total))
    kappa = 0.0 if pe == 1.0 else float((oa - pe) / (1.0 - pe))
    return {
        "oa": float(oa),
        "miou": miou,
        "fwiou": fwiou,
        "kappa": kappa,
        "iou": iou,
    }
