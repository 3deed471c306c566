"""Evaluation metrics for the three tasks.

Every mean is reduced with math.fsum, which returns the exactly rounded
sum regardless of element order. A per-pixel reference implementation
that also reduces with fsum therefore produces bit-identical numbers,
so reproducibility tests can compare with == instead of tolerances.

Depth metrics follow the usual monocular-depth conventions: predictions
are clamped to at least 1e-3 before ratios and logs, and the threshold
accuracies count max(pred/gt, gt/pred) < 1.25^k.

Normal metrics are angles in degrees between unit vectors; both maps are
renormalized per pixel before the dot product.

Segmentation metrics come from the confusion matrix: overall pixel
accuracy, mean per-class recall over classes present in the target, and
mean intersection-over-union over classes present in target or
prediction.
"""

import math
from typing import Dict, Optional

import numpy as np

from .errors import ContractError, UndefinedResultError

DEPTH_CLAMP = 1e-3

DEPTH_METRIC_NAMES = ("rmse", "rel", "rmse_log", "delta1", "delta2", "delta3")
NORMAL_METRIC_NAMES = ("mean", "median", "rmse_n", "acc_11", "acc_22", "acc_30")
SEG_METRIC_NAMES = ("pixel_acc", "mean_acc", "iou")


def _fmean(values: np.ndarray) -> float:
    return math.fsum(values) / values.size


def depth_metrics(pred: np.ndarray, gt: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> Dict[str, float]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ContractError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    if mask is not None:
        keep = np.asarray(mask).reshape(-1).astype(bool)
        pred, gt = pred[keep], gt[keep]
    if pred.size == 0:
        raise UndefinedResultError("depth metrics: no valid pixels")
    if np.any(gt <= 0):
        raise ContractError("depth metrics: target must be positive on valid pixels")
    p = np.maximum(pred, DEPTH_CLAMP)
    diff = p - gt
    ratio = np.maximum(p / gt, gt / p)
    log_diff = np.log(p) - np.log(gt)
    n = p.size
    return {
        "rmse": math.sqrt(math.fsum(diff * diff) / n),
        "rel": _fmean(np.abs(diff) / gt),
        "rmse_log": math.sqrt(math.fsum(log_diff * log_diff) / n),
        "delta1": int(np.count_nonzero(ratio < 1.25)) / n,
        "delta2": int(np.count_nonzero(ratio < 1.25 ** 2)) / n,
        "delta3": int(np.count_nonzero(ratio < 1.25 ** 3)) / n,
    }


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(v * v, axis=0))
    return v / np.maximum(norm, 1e-12)


def angular_error_deg(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel angle in degrees between two (3, ...) vector maps."""
    dot = np.sum(_unit_rows(pred) * _unit_rows(gt), axis=0)
    return np.degrees(np.arccos(np.clip(dot, -1.0, 1.0)))


def normal_metrics(pred: np.ndarray, gt: np.ndarray,
                   mask: Optional[np.ndarray] = None) -> Dict[str, float]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[0] != 3:
        raise ContractError(f"normal shapes must match (3, ...): {pred.shape} vs {gt.shape}")
    ang = angular_error_deg(pred, gt).reshape(-1)
    if mask is not None:
        ang = ang[np.asarray(mask).reshape(-1).astype(bool)]
    if ang.size == 0:
        raise UndefinedResultError("normal metrics: no valid pixels")
    n = ang.size
    return {
        "mean": _fmean(ang),
        "median": float(np.median(ang)),
        "rmse_n": math.sqrt(math.fsum(ang * ang) / n),
        "acc_11": int(np.count_nonzero(ang < 11.25)) / n,
        "acc_22": int(np.count_nonzero(ang < 22.5)) / n,
        "acc_30": int(np.count_nonzero(ang < 30.0)) / n,
    }


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_label: Optional[int] = None) -> np.ndarray:
    """(num_classes, num_classes) counts indexed [target, predicted]."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ContractError(f"label shapes differ: {pred.shape} vs {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool)
    if ignore_label is not None:
        keep &= gt != ignore_label
    pred, gt = pred[keep], gt[keep]
    if np.any((pred < 0) | (pred >= num_classes)) or np.any((gt < 0) | (gt >= num_classes)):
        raise ContractError(f"labels outside [0, {num_classes})")
    counts = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2)
    return counts.reshape(num_classes, num_classes)


def seg_metrics_from_confusion(conf: np.ndarray) -> Dict[str, float]:
    conf = np.asarray(conf, dtype=np.int64)
    total = int(conf.sum())
    if total == 0:
        raise UndefinedResultError("segmentation metrics: no valid pixels")
    tp = np.diag(conf)
    gt_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    pixel_acc = int(tp.sum()) / total
    present_gt = np.flatnonzero(gt_count > 0)
    recalls = [int(tp[c]) / int(gt_count[c]) for c in present_gt]
    present_any = np.flatnonzero((gt_count > 0) | (pred_count > 0))
    ious = [int(tp[c]) / int(gt_count[c] + pred_count[c] - tp[c]) for c in present_any]
    return {
        "pixel_acc": pixel_acc,
        "mean_acc": math.fsum(recalls) / len(recalls),
        "iou": math.fsum(ious) / len(ious),
    }


def seg_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                ignore_label: Optional[int] = None) -> Dict[str, float]:
    return seg_metrics_from_confusion(
        confusion_matrix(pred, gt, num_classes, ignore_label))


def format_value(value: float) -> str:
    """Canonical 6-significant-digit rendering used in CSV artifacts."""
    return f"{value:.6g}"


def metric_names(task_value: str):
    return {
        "depth": DEPTH_METRIC_NAMES,
        "normal": NORMAL_METRIC_NAMES,
        "seg": SEG_METRIC_NAMES,
    }[task_value]
