"""Class activation maps and pseudo-mask generation.

Foreground maps are the rectified class score maps, max-normalized per map;
maps of classes absent from the image-level label are forced to zero. The
background map is (1 - max foreground)^p. Pseudo-masks are the argmax of the
refined maps with low-confidence pixels set to the ignore label."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .pamr import pamr_refine


@dataclass
class CamStack:
    maps: torch.Tensor  # (B, num_classes + 1, H, W); channel 0 = background

    @property
    def background(self):
        return self.maps[:, :1]

    @property
    def foreground(self):
        return self.maps[:, 1:]

    def to_probs(self):
        return self.maps / self.maps.sum(dim=1, keepdim=True).clamp_min(1e-8)

    def argmax(self):
        return self.maps.argmax(dim=1)


def cams_from_scores(score_maps, label_vec=None, bg_power=3.0) -> CamStack:
    """Build a CamStack from raw (B, num_classes, H, W) foreground score maps."""
    fg = torch.relu(score_maps)
    peak = fg.amax(dim=(2, 3), keepdim=True)
    fg = fg / peak.clamp_min(1e-8)
    if label_vec is not None:
        fg = fg * label_vec.to(fg.dtype).view(*label_vec.shape, 1, 1)
    bg = (1.0 - fg.amax(dim=1, keepdim=True)) ** bg_power
    return CamStack(torch.cat([bg, fg], dim=1))


def make_cams(net, image, label_vec=None, bg_power=3.0) -> CamStack:
    """Run the network and derive CAMs from its full-resolution score maps."""
    out = net(image)
    return cams_from_scores(out["logits"][:, 1:], label_vec, bg_power)


def pseudo_mask_from_cams(cams: CamStack, image, confidence=0.7, ignore_label=255,
                          pamr_iters=5, pamr_window=3, pamr_tau=0.1):
    """Refine CAM probabilities against the image and threshold to a mask."""
    probs = cams.to_probs()
    refined = pamr_refine(probs, image, iters=pamr_iters, window=pamr_window, tau=pamr_tau)
    conf, mask = refined.max(dim=1)
    mask = mask.long()
    mask[conf < confidence] = ignore_label
    return mask
