"""Deterministic low-light degradation of normal-light RGB images.

RGB-domain approximation of a sensor pipeline: linearize, scale the
illumination, jitter white balance, add shot/read noise in the linear
domain, clamp, re-apply gamma, quantize. Every step is a pure function of
(config, sample_id), so darkening a corpus twice is byte-identical.
"""
from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import np_rng
from .toyscene import MANIFEST_NAME, MANIFEST_VERSION, load_manifest


@dataclass(frozen=True)
class DarkenConfig:
    gamma: float = 2.2
    illum_range: tuple = (0.05, 0.2)
    shot_noise: float = 1e-3
    read_noise: float = 1e-4
    wb_jitter: float = 0.1
    quant_bits: int = 8
    seed: int = 99

    def validate(self):
        if not (self.gamma > 0):
            raise ValueError("gamma must be > 0")
        k_lo, k_hi = self.illum_range
        if not (0 < k_lo <= k_hi <= 1):
            raise ValueError("illum_range must satisfy 0 < k_lo <= k_hi <= 1")
        for name in ("shot_noise", "read_noise", "wb_jitter"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if not (1 <= self.quant_bits <= 16):
            raise ValueError("quant_bits must be in [1, 16]")

    def to_dict(self):
        return {
            "gamma": float(self.gamma),
            "illum_range": [float(v) for v in self.illum_range],
            "shot_noise": float(self.shot_noise),
            "read_noise": float(self.read_noise),
            "wb_jitter": float(self.wb_jitter),
            "quant_bits": int(self.quant_bits),
            "seed": int(self.seed),
        }

    @staticmethod
    def from_dict(d):
        return DarkenConfig(
            gamma=float(d["gamma"]),
            illum_range=tuple(d["illum_range"]),
            shot_noise=float(d["shot_noise"]),
            read_noise=float(d["read_noise"]),
            wb_jitter=float(d["wb_jitter"]),
            quant_bits=int(d["quant_bits"]),
            seed=int(d["seed"]),
        )


# severe but non-destructive at 64px; the luminance band is the measured
# per-image mean-luminance ratio range used by the pipeline checks
PROFILES = {
    "dark-default": DarkenConfig(),
    "identity": DarkenConfig(
        gamma=2.2, illum_range=(1.0, 1.0), shot_noise=0.0, read_noise=0.0,
        wb_jitter=0.0, quant_bits=16, seed=99,
    ),
}
LUMINANCE_BANDS = {
    "dark-default": (0.20, 0.52),
}


def get_profile(name: str) -> DarkenConfig:
    if name not in PROFILES:
        raise KeyError(f"unknown darkening profile {name!r}; known: {sorted(PROFILES)}")
    return PROFILES[name]


def quantize(x: np.ndarray, bits: int) -> np.ndarray:
    """Round-half-up quantization to 2**bits evenly spaced levels in [0, 1]."""
    levels = (1 << bits) - 1
    return np.floor(x * levels + 0.5) / levels


def darken(image: np.ndarray, cfg: DarkenConfig, sample_id: int) -> np.ndarray:
    cfg.validate()
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(image).all():
        raise ValueError("input image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("input image values must lie in [0, 1]")

    rng = np_rng(cfg.seed ^ int(sample_id), "darken")
    lin = image ** cfg.gamma
    k = rng.uniform(*cfg.illum_range)
    lin = lin * k
    gains = rng.uniform(1.0 - cfg.wb_jitter, 1.0 + cfg.wb_jitter, 3)
    lin = lin * gains.reshape(1, 1, 3)
    var = cfg.shot_noise * lin + cfg.read_noise
    lin = lin + rng.standard_normal(lin.shape) * np.sqrt(var)
    lin = np.clip(lin, 0.0, 1.0)
    out = lin ** (1.0 / cfg.gamma)
    out = quantize(out, cfg.quant_bits)
    return out.astype(np.float32)


def darken_corpus(corpus_dir, cfg: DarkenConfig, out_dir) -> Path:
    """Write a darkened twin of a persisted split: images re-rendered through
    `darken`, masks/depth reused byte-for-byte, manifest annotated with cfg."""
    cfg.validate()
    corpus_dir = Path(corpus_dir)
    out_dir = Path(out_dir)
    manifest = load_manifest(corpus_dir)
    for sub in ("images", "masks", "depth"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for entry in manifest["samples"]:
        src = np.asarray(Image.open(corpus_dir / entry["image"]), dtype=np.float64) / 255.0
        dark = darken(src, cfg, entry["id"])
        dark_u8 = np.clip(np.round(dark.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(dark_u8, mode="RGB").save(out_dir / entry["image"])
        shutil.copyfile(corpus_dir / entry["mask"], out_dir / entry["mask"])
        shutil.copyfile(corpus_dir / entry["depth"], out_dir / entry["depth"])
    dark_manifest = dict(manifest)
    dark_manifest["version"] = MANIFEST_VERSION
    dark_manifest["darken"] = cfg.to_dict()
    tmp = out_dir / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(dark_manifest, indent=2, sort_keys=True))
    tmp.replace(out_dir / MANIFEST_NAME)
    return out_dir


def mean_luminance(image: np.ndarray) -> float:
    return float(np.asarray(image, dtype=np.float64).mean())


def luminance_ratio(dark: np.ndarray, original: np.ndarray) -> float:
    denom = mean_luminance(original)
    if denom <= 0:
        raise ValueError("original image has zero mean luminance")
    return mean_luminance(dark) / denom
