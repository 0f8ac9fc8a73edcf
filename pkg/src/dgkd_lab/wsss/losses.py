"""Classification and self-supervised segmentation losses, plus the additive
loss report used by every training step."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


def classification_loss(image_scores, label_vec):
    """Multi-label binary cross-entropy with logits, averaged over classes."""
    if not torch.isfinite(image_scores).all():
        raise ValueError("non-finite classification scores")
    return F.binary_cross_entropy_with_logits(image_scores, label_vec.to(image_scores.dtype))


def self_sup_seg_loss(logits, pseudo_mask, ignore_label=255, class_balance=False):
    """Per-pixel cross-entropy against a pseudo-mask, skipping ignored pixels.
    Returns 0 when every pixel is ignored.

    With class_balance, pixels are reweighted by inverse pseudo-label
    frequency (weighted mean, weights normalized away), which stops a class
    that momentarily over-expands from snowballing through self-training."""
    valid = pseudo_mask != ignore_label
    if not bool(valid.any()):
        return logits.sum() * 0.0
    target = pseudo_mask.clone()
    target[~valid] = 0
    ce = F.cross_entropy(logits, target, reduction="none")
    if not class_balance:
        return ce[valid].mean()
    k = logits.shape[1]
    counts = torch.bincount(target[valid].view(-1), minlength=k).to(ce.dtype)
    present = counts > 0
    weights = torch.zeros_like(counts)
    weights[present] = float(valid.sum()) / (float(present.sum()) * counts[present])
    pix_w = weights[target]
    return (ce * pix_w)[valid].sum() / pix_w[valid].sum()


@dataclass
class LossReport:
    step: int
    l_cls: float
    l_seg: float
    l_diff: list = field(default_factory=list)
    l_kd: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    l_overall: float = 0.0

    @staticmethod
    def build(step, l_cls, l_seg, l_diff=(), l_kd=(), weights=None):
        l_diff = [float(v) for v in l_diff]
        l_kd = [float(v) for v in l_kd]
        if weights is None:
            weights = [1.0] * len(l_diff)
        weights = [float(w) for w in weights]
        overall = float(l_cls) + float(l_seg) + sum(
            w * (d + k) for w, d, k in zip(weights, l_diff, l_kd)
        )
        return LossReport(
            step=int(step), l_cls=float(l_cls), l_seg=float(l_seg),
            l_diff=l_diff, l_kd=l_kd, weights=weights, l_overall=overall,
        )

    def recompute_overall(self):
        return self.l_cls + self.l_seg + sum(
            w * (d + k) for w, d, k in zip(self.weights, self.l_diff, self.l_kd)
        )

    def to_dict(self):
        return {
            "step": self.step, "l_cls": self.l_cls, "l_seg": self.l_seg,
            "l_diff": self.l_diff, "l_kd": self.l_kd, "weights": self.weights,
            "l_overall": self.l_overall,
        }

    @staticmethod
    def from_dict(d):
        return LossReport(
            step=d["step"], l_cls=d["l_cls"], l_seg=d["l_seg"],
            l_diff=list(d["l_diff"]), l_kd=list(d["l_kd"]),
            weights=list(d["weights"]), l_overall=d["l_overall"],
        )
