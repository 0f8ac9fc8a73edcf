"""Single-run orchestration: resolve and validate the config, make sure the
corpora exist, train, stream loss/metric records to disk, checkpoint, and
write the manifest."""
from __future__ import annotations

import json
import os
from pathlib import Path

from ..config import (ConfigError, config_hash, resolve_config, to_plain,
                      validate_config)
from ..lowlight import DarkenConfig, darken_corpus, get_profile
from ..toyscene import SceneSpec, load_corpus, load_manifest, synthesize_corpus
from ..wsss import load_segnet, save_checkpoint, train_student, train_teacher
from .manifest import RunManifest, corpus_hash

ENV_OUT_ROOT = "DGKD_LAB_OUT"


def scene_spec_from_cfg(cfg) -> SceneSpec:
    d = cfg["data"]
    return SceneSpec(
        image_size=int(d["image_size"]),
        num_classes=int(d["num_classes"]),
        shapes_per_image=tuple(d["shapes_per_image"]),
        color_palette=None if d.get("palette") is None else tuple(tuple(c) for c in d["palette"]),
        depth_range=tuple(d["depth_range"]),
        seed=int(d["seed"]),
    )


def darken_config_from_cfg(cfg) -> DarkenConfig:
    d = cfg["dark"]
    if "profile" in d and d["profile"]:
        return get_profile(d["profile"])
    return DarkenConfig.from_dict(d)


def ensure_corpora(cfg, need_dark: bool):
    """Synthesize the normal corpus (and its dark twin) if absent; verify an
    existing corpus was generated by the same spec."""
    spec = scene_spec_from_cfg(cfg)
    root = Path(cfg["data"]["root"])
    normal = root / "normal"
    if not (normal / "train").exists():
        synthesize_corpus(spec, normal, int(cfg["data"]["train_count"]), int(cfg["data"]["val_count"]))
    for split in ("train", "val"):
        manifest = load_manifest(normal / split)
        if manifest["spec"] != spec.to_dict():
            raise ConfigError(
                f"data.root: existing corpus at {normal / split} was generated by a different spec"
            )
    dirs = {"normal_train": normal / "train", "normal_val": normal / "val"}
    if need_dark:
        dcfg = darken_config_from_cfg(cfg)
        dark = root / "dark"
        for split in ("train", "val"):
            out = dark / split
            if not out.exists():
                darken_corpus(normal / split, dcfg, out)
            manifest = load_manifest(out)
            if manifest["darken"] != dcfg.to_dict():
                raise ConfigError(
                    f"data.root: existing dark corpus at {out} used a different darkening config"
                )
        dirs.update({"dark_train": dark / "train", "dark_val": dark / "val"})
    return dirs


def default_run_id(cfg) -> str:
    return f"{cfg['run']['mode']}-s{cfg['run']['seed']}-{config_hash(to_plain(cfg))[:8]}"


def resolve_out_root(cfg, out_root=None) -> Path:
    if out_root is not None:
        return Path(out_root)
    env = os.environ.get(ENV_OUT_ROOT)
    if env:
        return Path(env)
    return Path(cfg["run"]["out_root"])


class _RecordWriter:
    def __init__(self, run_dir):
        self.paths = {
            "loss": Path(run_dir) / "losses.jsonl",
            "metric": Path(run_dir) / "metrics.jsonl",
        }
        # fresh files per run; records are append-only within the run
        self.handles = {k: open(p, "w") for k, p in self.paths.items()}

    def __call__(self, kind, record):
        handle = self.handles[kind]
        handle.write(json.dumps(record, sort_keys=True) + "\n")
        handle.flush()

    def close(self):
        for h in self.handles.values():
            h.close()


def run(config, out_root=None) -> RunManifest:
    """Execute one training run described by `config` (path or dict).

    Returns the written manifest; on mid-run failure the manifest is written
    with status=failed and the error re-raised."""
    cfg = to_plain(resolve_config(config))
    validate_config(cfg)
    mode = cfg["run"]["mode"]
    run_id = cfg["run"].get("run_id") or default_run_id(cfg)
    out = resolve_out_root(cfg, out_root)
    run_dir = out / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    manifest = RunManifest.start(run_id, cfg)
    manifest.write(run_dir)
    writer = _RecordWriter(run_dir)
    try:
        dirs = ensure_corpora(cfg, need_dark=(mode == "student"))
        manifest.corpus_hashes = {k: corpus_hash(v) for k, v in dirs.items()}

        if mode == "teacher":
            train_samples, _ = load_corpus(dirs["normal_train"])
            val_samples, _ = load_corpus(dirs["normal_val"])
            result = train_teacher(cfg, train_samples, val_samples, on_record=writer)
        else:
            normal_train, _ = load_corpus(dirs["normal_train"])
            dark_train, _ = load_corpus(dirs["dark_train"])
            dark_val, _ = load_corpus(dirs["dark_val"])
            teacher = None
            if cfg["dgkd"]["enabled"]:
                teacher = load_segnet(cfg["teacher"]["checkpoint"], cfg["run"]["device"])
            result = train_student(cfg, normal_train, dark_train, dark_val,
                                   teacher=teacher, on_record=writer)

        ckpt = run_dir / "checkpoint.pt"
        save_checkpoint(ckpt, cfg, result, step=int(cfg["train"]["steps"]))
        manifest.artifacts = {
            "checkpoint": str(ckpt),
            "losses": str(writer.paths["loss"]),
            "metrics": str(writer.paths["metric"]),
        }
        final_val = [r for r in result.metric_records if r["split"] == "val"][-1]
        final_train = [r for r in result.metric_records if r["split"] == "train"][-1]
        manifest.metrics_summary = {
            "final_val": final_val,
            "final_train": final_train,
            "final_loss": result.loss_history[-1].to_dict(),
        }
        manifest.finish("ok")
        manifest.write(run_dir)
        return manifest
    except Exception as exc:
        manifest.finish("failed", error=f"{type(exc).__name__}: {exc}")
        manifest.write(run_dir)
        raise
    finally:
        writer.close()
