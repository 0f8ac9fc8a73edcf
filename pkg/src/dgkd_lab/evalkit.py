"""Segmentation metrics: confusion-matrix accumulation, per-class IoU, mean
IoU, and pixel accuracy. Classes with zero union (absent from both ground
truth and prediction) are excluded from the mean."""
from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    def __init__(self, num_classes, class_names=None):
        """`num_classes` counts foreground classes; the matrix has one extra
        row/column for the background class 0."""
        self.n = num_classes + 1
        self.counts = np.zeros((self.n, self.n), dtype=np.int64)
        if class_names is None:
            class_names = ["background"] + [f"class{c}" for c in range(1, self.n)]
        if len(class_names) != self.n:
            raise ValueError(f"need {self.n} class names, got {len(class_names)}")
        self.class_names = list(class_names)

    def copy(self):
        cm = ConfusionMatrix(self.n - 1, self.class_names)
        cm.counts = self.counts.copy()
        return cm

    def merge(self, other: "ConfusionMatrix"):
        if other.counts.shape != self.counts.shape:
            raise ValueError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred_mask, gt_mask, ignore_label=255) -> ConfusionMatrix:
    pred = np.asarray(pred_mask).astype(np.int64).ravel()
    gt = np.asarray(gt_mask).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError("pred and gt masks must have the same shape")
    keep = gt != ignore_label
    pred, gt = pred[keep], gt[keep]
    if pred.size == 0:
        return cm
    if (pred < 0).any() or (pred >= cm.n).any():
        raise ValueError("prediction contains out-of-range class ids")
    if (gt < 0).any() or (gt >= cm.n).any():
        raise ValueError("ground truth contains out-of-range class ids")
    idx = gt * cm.n + pred
    cm.counts += np.bincount(idx, minlength=cm.n * cm.n).reshape(cm.n, cm.n)
    return cm


def metrics(cm: ConfusionMatrix) -> dict:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    present = union > 0
    iou = np.zeros(cm.n)
    iou[present] = tp[present] / union[present]
    miou = float(iou[present].mean())
    pixacc = float(tp.sum() / counts.sum())
    per_class = {
        name: (float(iou[i]) if present[i] else None)
        for i, name in enumerate(cm.class_names)
    }
    return {"miou": miou, "pixacc": pixacc, "per_class_iou": per_class}
