"""Synthetic multi-object scene corpus with pixel-exact masks, image-level
labels, and analytic depth.

Scenes are flat-shaded shapes on a gray background. Every shape instance
carries one depth value (1 = near, 0 = far, background fixed at 0.1) and
overlaps are resolved per pixel by nearest-wins. Class identity is a
(shape kind, base color) pair with per-instance color jitter and additive
texture noise, so image-level classification is nontrivial but learnable.
Generation is a pure function of (spec, split, index): the same spec
regenerates a bit-identical corpus.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import np_rng

BACKGROUND_DEPTH = 0.1
BACKGROUND_GRAY = 0.5
COLOR_JITTER = 0.1
TEXTURE_SIGMA = 0.02
SHAPE_KINDS = ("rect", "circle", "triangle")
MIN_COVERAGE = 0.05

SPLITS = ("train", "val")
_SPLIT_CODES = {"train": 0, "val": 1}

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def default_palette(num_classes):
    """Evenly spaced hues at matched saturation/value, one color per class."""
    cols = []
    for c in range(num_classes):
        rgb = colorsys.hsv_to_rgb(c / num_classes, 0.6, 0.75)
        cols.append(tuple(round(v, 4) for v in rgb))
    return tuple(cols)


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    num_classes: int = 3
    shapes_per_image: tuple = (2, 4)
    color_palette: tuple | None = None  # None -> default_palette(num_classes)
    depth_range: tuple = (0.3, 0.95)
    seed: int = 0

    def palette(self):
        if self.color_palette is None:
            return default_palette(self.num_classes)
        return tuple(tuple(float(v) for v in c) for c in self.color_palette)

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        lo, hi = self.shapes_per_image
        if not (0 <= lo <= hi):
            raise ValueError("shapes_per_image must be an inclusive range 0 <= lo <= hi")
        near, far = self.depth_range
        if not (near < far):
            raise ValueError("depth_range bounds must satisfy lo < hi")
        if not (BACKGROUND_DEPTH < near and far <= 1.0):
            raise ValueError(
                f"depth_range must lie in ({BACKGROUND_DEPTH}, 1] so shapes stay in front of the background"
            )
        if len(self.palette()) != self.num_classes:
            raise ValueError(
                f"palette length {len(self.palette())} != num_classes {self.num_classes}"
            )

    def to_dict(self):
        return {
            "image_size": int(self.image_size),
            "num_classes": int(self.num_classes),
            "shapes_per_image": [int(v) for v in self.shapes_per_image],
            "color_palette": [list(c) for c in self.palette()],
            "depth_range": [float(v) for v in self.depth_range],
            "seed": int(self.seed),
        }

    @staticmethod
    def from_dict(d):
        return SceneSpec(
            image_size=int(d["image_size"]),
            num_classes=int(d["num_classes"]),
            shapes_per_image=tuple(d["shapes_per_image"]),
            color_palette=tuple(tuple(c) for c in d["color_palette"]),
            depth_range=tuple(d["depth_range"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class ShapeInstance:
    class_id: int  # 1..num_classes (0 is background)
    kind: str
    cx: float
    cy: float
    size: float
    aspect: float
    depth: float
    color: tuple


@dataclass
class SceneSample:
    image: np.ndarray      # (H, W, 3) float32 in [0, 1]
    label_vec: np.ndarray  # (num_classes,) uint8 multi-hot
    gt_mask: np.ndarray    # (H, W) uint8 in {0..num_classes}
    depth: np.ndarray      # (H, W) float32 in [0, 1]
    sample_id: int
    shapes: tuple | None = None  # None once loaded back from disk


def _footprint(shape: ShapeInstance, size_px: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size_px, 0:size_px].astype(np.float64)
    cx, cy, s = shape.cx, shape.cy, shape.size
    if shape.kind == "rect":
        hw = s / 2.0
        hh = s * shape.aspect / 2.0
        return (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
    if shape.kind == "circle":
        r = s / 2.0
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape.kind == "triangle":
        # upward isosceles: apex at cy - s/2, base width s at cy + s/2
        top = cy - s / 2.0
        frac = np.clip((yy - top) / max(s, 1e-9), 0.0, 1.0)
        inside_y = (yy >= top) & (yy <= cy + s / 2.0)
        return inside_y & (np.abs(xx - cx) <= frac * s / 2.0)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def _draw_shapes(spec: SceneSpec, rng: np.random.Generator):
    lo, hi = spec.shapes_per_image
    n = int(rng.integers(lo, hi + 1))
    palette = spec.palette()
    shapes = []
    for _ in range(n):
        class_id = 1 + int(rng.integers(spec.num_classes))
        kind = SHAPE_KINDS[(class_id - 1) % len(SHAPE_KINDS)]
        size = float(rng.uniform(0.18, 0.38)) * spec.image_size
        margin = size / 2.0
        cx = float(rng.uniform(margin, spec.image_size - margin))
        cy = float(rng.uniform(margin, spec.image_size - margin))
        aspect = float(rng.uniform(0.7, 1.3))
        depth = float(rng.uniform(*spec.depth_range))
        base = np.asarray(palette[class_id - 1], dtype=np.float64)
        color = np.clip(base + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3), 0.0, 1.0)
        shapes.append(
            ShapeInstance(class_id, kind, cx, cy, size, aspect, depth, tuple(color))
        )
    return tuple(shapes)


def _render(spec: SceneSpec, shapes, rng: np.random.Generator):
    hw = spec.image_size
    image = np.full((hw, hw, 3), BACKGROUND_GRAY, dtype=np.float64)
    mask = np.zeros((hw, hw), dtype=np.uint8)
    depth = np.full((hw, hw), BACKGROUND_DEPTH, dtype=np.float64)
    for shape in shapes:
        owned = _footprint(shape, hw) & (shape.depth > depth)
        depth[owned] = shape.depth
        mask[owned] = shape.class_id
        image[owned] = shape.color
    image = image + rng.normal(0.0, TEXTURE_SIGMA, image.shape)
    image = np.clip(image, 0.0, 1.0)
    return image.astype(np.float32), mask, depth.astype(np.float32)


def _label_vec(mask: np.ndarray, num_classes: int) -> np.ndarray:
    vec = np.zeros(num_classes, dtype=np.uint8)
    present = np.unique(mask)
    for c in present:
        if c > 0:
            vec[c - 1] = 1
    return vec


def make_sample(spec: SceneSpec, split: str, index: int) -> SceneSample:
    """Deterministically build sample `index` of `split`."""
    rng = np_rng(spec.seed, "scene", _SPLIT_CODES[split], index)
    shapes = _draw_shapes(spec, rng)
    image, mask, depth = _render(spec, shapes, rng)
    sample_id = index * len(_SPLIT_CODES) + _SPLIT_CODES[split]
    return SceneSample(
        image=image,
        label_vec=_label_vec(mask, spec.num_classes),
        gt_mask=mask,
        depth=depth,
        sample_id=sample_id,
        shapes=shapes,
    )


def generate_corpus(spec: SceneSpec, count: int, split: str) -> list:
    """Generate `count` samples. For the train split, scenes are resampled
    until every class appears in at least MIN_COVERAGE of the samples;
    generation fails if that is unreachable within 10 * count attempts."""
    spec.validate()
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if count < 1:
        raise ValueError("count must be >= 1")

    if split != "train":
        return [make_sample(spec, split, i) for i in range(count)]

    # quota rounded down so tiny corpora (count < 1/MIN_COVERAGE) stay generable
    need = int(MIN_COVERAGE * count)
    have = np.zeros(spec.num_classes, dtype=np.int64)
    accepted = []
    max_attempts = 10 * count
    for attempt in range(max_attempts):
        slots = count - len(accepted)
        deficit = np.maximum(need - have, 0)
        if slots == 0 and deficit.sum() == 0:
            break
        if slots == 0:
            break  # full but under-covered: unreachable by resampling alone
        sample = make_sample(spec, split, attempt)
        helps = bool((sample.label_vec.astype(np.int64) * (deficit > 0)).any())
        # while free slots exceed the remaining deficit anything is acceptable
        if slots > int(deficit.sum()) or helps:
            accepted.append(sample)
            have += sample.label_vec
    deficit = np.maximum(need - have, 0)
    if len(accepted) < count or deficit.sum() > 0:
        raise RuntimeError(
            f"class coverage >= {MIN_COVERAGE:.0%} unreachable within {max_attempts} attempts "
            f"(per-class counts {have.tolist()}, need {need})"
        )
    return accepted


def render_depth(sample: SceneSample) -> np.ndarray:
    """Recompute the depth map from the sample's shape list by an explicit
    per-pixel max over shape layers (oracle for the incremental renderer)."""
    if sample.shapes is None:
        raise ValueError("sample has no shape list (was it loaded from disk?)")
    hw = sample.depth.shape[0]
    layers = [np.full((hw, hw), BACKGROUND_DEPTH, dtype=np.float64)]
    for shape in sample.shapes:
        layer = np.where(_footprint(shape, hw), shape.depth, -np.inf)
        layers.append(layer)
    stack = np.stack(layers, axis=0)
    return stack.max(axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# persistence: one directory per split with 8-bit image/mask PNGs, a 16-bit
# depth PNG, and a JSON manifest of label vectors plus the generating spec
# ---------------------------------------------------------------------------

def _mask_palette(spec: SceneSpec):
    flat = [40, 40, 40]
    for c in spec.palette():
        flat.extend(int(round(v * 255)) for v in c)
    flat.extend([0, 0, 0] * (256 - 1 - spec.num_classes))
    return flat


def save_corpus(samples, out_dir, spec: SceneSpec, split: str, darken=None) -> Path:
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "depth"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    palette = _mask_palette(spec)
    entries = []
    for i, s in enumerate(samples):
        name = f"{i:05d}.png"
        img_u8 = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img_u8, mode="RGB").save(out_dir / "images" / name)
        mask_img = Image.fromarray(s.gt_mask, mode="P")
        mask_img.putpalette(palette)
        mask_img.save(out_dir / "masks" / name)
        depth_u16 = np.round(s.depth.astype(np.float64) * 65535.0).astype(np.uint16)
        Image.fromarray(depth_u16).save(out_dir / "depth" / name)
        entries.append(
            {
                "id": int(s.sample_id),
                "image": f"images/{name}",
                "mask": f"masks/{name}",
                "depth": f"depth/{name}",
                "labels": [int(v) for v in s.label_vec],
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "split": split,
        "spec": spec.to_dict(),
        "darken": darken,
        "samples": entries,
    }
    tmp = out_dir / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(out_dir / MANIFEST_NAME)
    return out_dir


def load_manifest(split_dir) -> dict:
    path = Path(split_dir) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"missing corpus manifest: {path}")
    return json.loads(path.read_text())


def load_corpus(split_dir):
    """Load a persisted split. Returns (samples, manifest); samples carry no
    shape list (arrays only)."""
    split_dir = Path(split_dir)
    manifest = load_manifest(split_dir)
    SceneSpec.from_dict(manifest["spec"])  # stored spec must parse
    samples = []
    for entry in manifest["samples"]:
        image = np.asarray(Image.open(split_dir / entry["image"]), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(split_dir / entry["mask"]), dtype=np.uint8)
        depth_raw = np.asarray(Image.open(split_dir / entry["depth"]))
        depth = depth_raw.astype(np.float32) / 65535.0
        samples.append(
            SceneSample(
                image=image,
                label_vec=np.asarray(entry["labels"], dtype=np.uint8),
                gt_mask=mask,
                depth=depth,
                sample_id=int(entry["id"]),
                shapes=None,
            )
        )
    if len({s.sample_id for s in samples}) != len(samples):
        raise ValueError("duplicate sample ids in manifest")
    return samples, manifest


def synthesize_corpus(spec: SceneSpec, out_root, train_count: int, val_count: int) -> Path:
    """Generate and persist both splits under out_root/{train,val}."""
    out_root = Path(out_root)
    for split, count in (("train", train_count), ("val", val_count)):
        samples = generate_corpus(spec, count, split)
        save_corpus(samples, out_root / split, spec, split)
    return out_root
