"""Small fully-convolutional segmentation network with named feature taps.

Two strided stages (stride 2 and stride 4) feed a 1x1 classification head
that emits per-class score maps (background channel first) at stride 4.
Score maps are upsampled bilinearly to the input size; image-level class
scores are the global average pool of the foreground score maps. The stage
taps and the stride-4 mask logits are exposed by name for distillation and
fusion."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..seeding import seed_torch_init

STAGE_NAMES = ("stage1", "stage2")
MASK_TAP = "mask_logits"


class SegNet(nn.Module):
    # inputs sit in [0, 1] around the gray background; standardize before conv
    INPUT_MEAN = 0.5
    INPUT_STD = 0.25

    def __init__(self, num_classes, c1=8, c2=16):
        super().__init__()
        self.num_classes = num_classes
        self.c1 = c1
        self.c2 = c2
        self.stage1 = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.GroupNorm(2, c1), nn.ReLU(inplace=True),
            nn.Conv2d(c1, c1, 3, padding=1), nn.GroupNorm(2, c1), nn.ReLU(inplace=True),
        )
        self.stage2 = nn.Sequential(
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.GroupNorm(2, c2), nn.ReLU(inplace=True),
            nn.Conv2d(c2, c2, 3, padding=1), nn.GroupNorm(2, c2), nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(c2, num_classes + 1, 1)

    @property
    def stage_channels(self):
        return {"stage1": self.c1, "stage2": self.c2, MASK_TAP: self.num_classes + 1}

    def forward(self, x, dgf2=None, depth=None):
        """Returns a dict of taps:
        stage1/stage2 features (post-fusion when dgf2 is active), mask_logits
        at stride 4, full-resolution logits, and image-level class scores."""
        x = (x - self.INPUT_MEAN) / self.INPUT_STD
        h1 = self.stage1(x)
        if dgf2 is not None:
            h1 = dgf2("stage1", h1, depth)
        h2 = self.stage2(h1)
        if dgf2 is not None:
            h2 = dgf2("stage2", h2, depth)
        score = self.head(h2)
        logits = F.interpolate(score, size=x.shape[-2:], mode="bilinear", align_corners=False)
        cls_scores = score[:, 1:].mean(dim=(2, 3))
        return {
            "stage1": h1,
            "stage2": h2,
            MASK_TAP: score,
            "logits": logits,
            "cls_scores": cls_scores,
        }


def build_segnet(num_classes, c1, c2, root_seed, *names) -> SegNet:
    """Construct a SegNet whose initialisation draws from a named substream."""
    seed_torch_init(root_seed, *names)
    return SegNet(num_classes, c1=c1, c2=c2)
