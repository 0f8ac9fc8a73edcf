"""Depth-guided feature fusion: a depth prior encoder, spatial feature
transform (elementwise scale/shift) conditioned on that prior, and a
consistency-attention fusion of the original and geometry-aware features.
Inserted per backbone stage; disabled stages pass features through
unchanged."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def sft_modulate(feat, beta, gamma):
    """Elementwise affine modulation beta * feat + gamma."""
    if beta.shape != feat.shape or gamma.shape != feat.shape:
        raise ValueError(
            f"modulation maps {tuple(beta.shape)}/{tuple(gamma.shape)} must match feature {tuple(feat.shape)}"
        )
    return beta * feat + gamma


def consistency_attention(feat_a, feat_b, lam):
    """Attention map keeping regions where both activations agree:
    lam * (1 - s(a)) * (1 - s(b)) + s(a) * s(b), valued in (0, 1)."""
    if feat_a.shape != feat_b.shape:
        raise ValueError("feature shapes must match")
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda must lie in [0, 1]")
    att_a = torch.sigmoid(feat_a)
    att_b = torch.sigmoid(feat_b)
    return lam * ((1.0 - att_a) * (1.0 - att_b)) + att_a * att_b


def consistency_fuse(feat, feat_geo, lam):
    """Fuse a feature with its geometry-aware counterpart through the
    consistency attention map."""
    att = consistency_attention(feat, feat_geo, lam)
    return feat_geo + att * (feat + feat_geo)


class PriorEncoder(nn.Module):
    """Three 3x3 conv + ReLU layers lifting a 1-channel depth map (already
    resized to the stage resolution) to a C-channel prior."""

    def __init__(self, channels, hidden=None):
        super().__init__()
        hidden = hidden or channels
        self.net = nn.Sequential(
            nn.Conv2d(1, hidden, 3, padding=1, padding_mode="replicate"), nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, 3, padding=1, padding_mode="replicate"), nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 3, padding=1, padding_mode="replicate"), nn.ReLU(inplace=True),
        )

    def forward(self, depth):
        return self.net(depth)


class SftBranchPair(nn.Module):
    """Two-conv branches producing the scale and shift maps. The final convs
    are initialized to emit (1, 0) so the modulation starts as identity."""

    def __init__(self, channels):
        super().__init__()
        self.scale = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate"), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate"),
        )
        self.shift = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate"), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate"),
        )
        nn.init.zeros_(self.scale[-1].weight)
        nn.init.ones_(self.scale[-1].bias)
        nn.init.zeros_(self.shift[-1].weight)
        nn.init.zeros_(self.shift[-1].bias)

    def forward(self, prior):
        return self.scale(prior), self.shift(prior)


class Dgf2Stage(nn.Module):
    """One insertion point: encode the depth prior at the stage resolution,
    modulate the stage feature, fuse with consistency attention."""

    def __init__(self, channels, lam=0.5):
        super().__init__()
        self.encoder = PriorEncoder(channels)
        self.branches = SftBranchPair(channels)
        self.lam = float(lam)

    def forward(self, feat, depth):
        if depth.dim() == 3:
            depth = depth.unsqueeze(1)
        prior_in = F.adaptive_avg_pool2d(depth, feat.shape[-2:])
        prior = self.encoder(prior_in)
        beta, gamma = self.branches(prior)
        feat_geo = sft_modulate(feat, beta, gamma)
        return consistency_fuse(feat, feat_geo, self.lam)


class Dgf2Bank(nn.Module):
    """Per-stage DGF2 modules. Stages not listed in `stages` pass through."""

    def __init__(self, stage_channels, stages, lam=0.5):
        super().__init__()
        self.stages = tuple(stages)
        self.lam = float(lam)
        unknown = [s for s in self.stages if s not in stage_channels]
        if unknown:
            raise ValueError(f"unknown dgf2 stages {unknown}; known: {sorted(stage_channels)}")
        self.blocks = nn.ModuleDict(
            {name: Dgf2Stage(stage_channels[name], lam) for name in self.stages}
        )

    def forward(self, name, feat, depth):
        if name not in self.blocks:
            return feat
        return self.blocks[name](feat, depth)
