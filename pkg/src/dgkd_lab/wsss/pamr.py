"""Pixel-adaptive refinement of class probability maps.

Each iteration replaces a pixel's class distribution with an affinity
weighted average over its window x window neighborhood (center included),
where the affinity is a softmax over neighbors of the negative squared RGB
distance scaled by tau. Every update is a convex combination, so per-pixel
probability sums are preserved."""
from __future__ import annotations

import torch
import torch.nn.functional as F


def _unfold_neighbors(x, window):
    # (B, C, H, W) -> (B, C, window*window, H, W) with replicate padding
    b, c, h, w = x.shape
    pad = window // 2
    xp = F.pad(x, [pad] * 4, mode="replicate")
    patches = F.unfold(xp, kernel_size=window)
    return patches.view(b, c, window * window, h, w)


def pamr_refine(probs, image, iters=5, window=3, tau=0.1):
    """Refine (B, K, H, W) probability maps against a (B, 3, H, W) image.

    iters=0 returns the input unchanged; even window sizes are rejected.
    """
    if window % 2 == 0:
        raise ValueError("window must be odd")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    if iters == 0:
        return probs
    if probs.shape[-2:] != image.shape[-2:]:
        raise ValueError("probability maps and image must share spatial size")

    # float64 internally keeps per-pixel sums within 1e-6 of 1 over many iters
    dtype = probs.dtype
    probs64 = probs.double()
    image64 = image.double()
    img_nb = _unfold_neighbors(image64, window)              # (B, 3, N, H, W)
    dist2 = ((img_nb - image64.unsqueeze(2)) ** 2).sum(1)    # (B, N, H, W)
    affinity = F.softmax(-dist2 / tau, dim=1).unsqueeze(1)

    out = probs64
    for _ in range(iters):
        nb = _unfold_neighbors(out, window)                  # (B, K, N, H, W)
        out = (nb * affinity).sum(2)
    return out.to(dtype)
