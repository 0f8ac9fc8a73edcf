"""Per-run reporting: metric tables, loss-curve plots, and qualitative
panels of image / dark image / pseudo-mask / prediction / ground truth."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..lowlight import darken
from ..toyscene import SceneSpec, load_corpus
from ..wsss import (cams_from_scores, load_checkpoint, pseudo_mask_from_cams)
from .manifest import RunManifest
from .run import darken_config_from_cfg

PANEL_SAMPLES = 4
IGNORE_COLOR = (255, 255, 255)
BG_COLOR = (40, 40, 40)


def _colorize(mask, palette, ignore_label=255):
    h, w = mask.shape
    out = np.zeros((h, w, 3), dtype=np.uint8)
    out[mask == 0] = BG_COLOR
    for c, color in enumerate(palette, start=1):
        out[mask == c] = tuple(int(round(v * 255)) for v in color)
    out[mask == ignore_label] = IGNORE_COLOR
    return out


def _to_u8(img_chw):
    arr = np.clip(img_chw, 0.0, 1.0)
    return (arr.transpose(1, 2, 0) * 255).round().astype(np.uint8)


def qualitative_panel(run_dir, out_path, num_samples=PANEL_SAMPLES):
    """Five aligned tiles per row: normal image, dark image, pseudo-mask,
    prediction, ground truth. All tiles share the sample's pixel size."""
    manifest = RunManifest.load(run_dir)
    cfg = manifest.config
    net, dgf2, _ = load_checkpoint(Path(run_dir) / "checkpoint.pt")
    net.eval()

    root = Path(cfg["data"]["root"])
    normal_val, val_manifest = load_corpus(root / "normal" / "val")
    spec = SceneSpec.from_dict(val_manifest["spec"])
    dark_dir = root / "dark" / "val"
    dark_val = load_corpus(dark_dir)[0] if dark_dir.exists() else None
    dcfg = darken_config_from_cfg(cfg)

    is_student = cfg["run"]["mode"] == "student"
    seg_cfg = cfg["train"]["seg"]
    rows = []
    for i in range(min(num_samples, len(normal_val))):
        normal = normal_val[i]
        if dark_val is not None:
            dark_img = dark_val[i].image
        else:
            dark_img = darken(normal.image, dcfg, normal.sample_id)
        eval_img = dark_img if is_student else normal.image
        x = torch.from_numpy(np.ascontiguousarray(eval_img.transpose(2, 0, 1)))[None]
        depth = torch.from_numpy(normal.depth)[None] if dgf2 is not None else None
        with torch.no_grad():
            out = net(x, dgf2=dgf2, depth=depth)
            labels = torch.from_numpy(normal.label_vec.astype(np.float32))[None]
            cams = cams_from_scores(out["logits"][:, 1:], labels,
                                    float(cfg["model"]["bg_power"]))
            pm = pseudo_mask_from_cams(
                cams, x,
                confidence=float(seg_cfg["confidence"]),
                ignore_label=int(seg_cfg["ignore_label"]),
                pamr_iters=int(seg_cfg["pamr_iters"]),
                pamr_window=int(seg_cfg["pamr_window"]),
                pamr_tau=float(seg_cfg["pamr_tau"]),
            )[0].numpy()
            pred = out["logits"].argmax(dim=1)[0].numpy()
        palette = spec.palette()
        tiles = [
            _to_u8(normal.image.transpose(2, 0, 1)),
            _to_u8(dark_img.transpose(2, 0, 1)),
            _colorize(pm, palette, int(seg_cfg["ignore_label"])),
            _colorize(pred, palette),
            _colorize(normal.gt_mask, palette),
        ]
        assert len({t.shape for t in tiles}) == 1
        rows.append(np.concatenate(tiles, axis=1))
    panel = np.concatenate(rows, axis=0)
    Image.fromarray(panel, mode="RGB").save(out_path)
    return out_path


def loss_curves(run_dir, out_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(run_dir) / "losses.jsonl"
    steps, l_cls, l_seg, l_diff, l_kd, l_all = [], [], [], [], [], []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        steps.append(rec["step"])
        l_cls.append(rec["l_cls"])
        l_seg.append(rec["l_seg"])
        l_diff.append(sum(rec["l_diff"]))
        l_kd.append(sum(rec["l_kd"]))
        l_all.append(rec["l_overall"])
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, l_cls, label="l_cls")
    ax.plot(steps, l_seg, label="l_seg")
    if any(v != 0 for v in l_diff):
        ax.plot(steps, l_diff, label="sum l_diff")
        ax.plot(steps, l_kd, label="sum l_kd")
    ax.plot(steps, l_all, label="l_overall", color="k", lw=0.8, alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def metric_curves(run_dir, out_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(run_dir) / "metrics.jsonl"
    by_split = {}
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        by_split.setdefault(rec["split"], []).append(rec)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for split, recs in by_split.items():
        ax.plot([r["step"] for r in recs], [r["miou"] for r in recs], label=f"{split} mIoU")
    ax.set_xlabel("step")
    ax.set_ylabel("mIoU")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def _metrics_table(run_dir) -> str:
    path = Path(run_dir) / "metrics.jsonl"
    lines = ["| step | split | mIoU | PixAcc | per-class IoU |", "|---|---|---|---|---|"]
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        per_class = " ".join(
            f"{k}:{(f'{v:.3f}' if v is not None else '-')}" for k, v in rec["per_class_iou"].items()
        )
        lines.append(
            f"| {rec['step']} | {rec['split']} | {rec['miou']:.4f} | {rec['pixacc']:.4f} | {per_class} |"
        )
    return "\n".join(lines)


def report(run_dirs, out_dir) -> Path:
    """Render tables, plots, and qualitative panels for finished runs.
    Missing runs are listed; the rest are still rendered."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# Run report", ""]
    missing = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        try:
            manifest = RunManifest.load(run_dir)
        except FileNotFoundError:
            missing.append(str(run_dir))
            continue
        rid = manifest.run_id
        lines += [f"## {rid}", "",
                  f"- status: {manifest.status}",
                  f"- config hash: `{manifest.config_hash[:12]}`",
                  f"- seed: {manifest.seed}", ""]
        if manifest.status != "ok":
            lines += [f"- error: {manifest.error}", ""]
            continue
        lines += [_metrics_table(run_dir), ""]
        losses_png = out_dir / f"{rid}-losses.png"
        miou_png = out_dir / f"{rid}-miou.png"
        panel_png = out_dir / f"{rid}-panel.png"
        loss_curves(run_dir, losses_png)
        metric_curves(run_dir, miou_png)
        qualitative_panel(run_dir, panel_png)
        lines += [f"![losses]({losses_png.name})", f"![miou]({miou_png.name})",
                  f"![panel]({panel_png.name})", ""]
    if missing:
        lines += ["## Missing runs", ""] + [f"- {m}" for m in missing]
    (out_dir / "report.md").write_text("\n".join(lines) + "\n")
    return out_dir
