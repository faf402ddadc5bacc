"""Evaluation metrics: accumulated-confusion mIoU, PSNR, depth MSE, CSV reports."""
from __future__ import annotations

import csv

import numpy as np

Array = np.ndarray

PSNR_CAP = 99.0


class ConfusionMatrix:
    """C x C integer counts; rows are ground truth, columns are predictions."""

    def __init__(self, n_classes: int):
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.n_classes)
        out.counts = self.counts + other.counts
        return out


def confusion_update(cm: ConfusionMatrix, gt: Array, pred: Array) -> ConfusionMatrix:
    """Accumulate per-pixel (gt, pred) pairs into the matrix."""
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    C = cm.n_classes
    if gt.size:
        if gt.min() < 0 or gt.max() >= C or pred.min() < 0 or pred.max() >= C:
            raise ValueError(f"labels outside [0, {C})")
        cm.counts += np.bincount(gt * C + pred, minlength=C * C).reshape(C, C)
    return cm


def miou(cm: ConfusionMatrix) -> tuple[Array, float]:
    """Per-class IoU (NaN where the union is empty) and their mean.

    Classes absent from both ground truth and prediction are excluded.
    """
    counts = cm.counts
    if counts.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=1) + counts.sum(axis=0) - np.diag(counts)
    iou = np.full(cm.n_classes, np.nan)
    valid = union > 0
    iou[valid] = tp[valid] / union[valid]
    return iou, float(np.nanmean(iou))


def image_metrics(pred_rgb: Array, gt_rgb: Array,
                  pred_depth: Array, gt_depth: Array) -> dict[str, float]:
    """PSNR of the color image (capped at 99 dB) and depth MSE over finite pixels."""
    pred_rgb = np.asarray(pred_rgb, dtype=np.float64)
    gt_rgb = np.asarray(gt_rgb, dtype=np.float64)
    if pred_rgb.shape != gt_rgb.shape:
        raise ValueError(f"rgb shape mismatch {pred_rgb.shape} vs {gt_rgb.shape}")
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    if pred_depth.shape != gt_depth.shape:
        raise ValueError(f"depth shape mismatch {pred_depth.shape} vs {gt_depth.shape}")

    mse_rgb = float(((pred_rgb - gt_rgb) ** 2).mean())
    psnr = PSNR_CAP if mse_rgb < 1e-10 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse_rgb))

    finite = np.isfinite(pred_depth) & np.isfinite(gt_depth)
    depth_mse = float(((pred_depth[finite] - gt_depth[finite]) ** 2).mean()) if finite.any() else float("nan")
    return {"psnr": float(psnr), "depth_mse": depth_mse}


def write_report(path, cm: ConfusionMatrix) -> None:
    """Per-class IoU rows plus a summary row."""
    iou, mean = miou(cm)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou"])
        for c, value in enumerate(iou):
            writer.writerow([c, "" if np.isnan(value) else f"{value:.6f}"])
        writer.writerow(["miou", f"{mean:.6f}"])


def write_confusion(path, cm: ConfusionMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in cm.counts:
            writer.writerow([int(v) for v in row])
