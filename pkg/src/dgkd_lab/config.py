"""Config loading with include/override semantics.

Configs are YAML trees. A top-level `include:` list names files (relative to
the including file) or packaged profiles (`profile:NAME`) that are deep
merged first, in order, with the including file winning. Every run config is
resolved against the packaged `toy-default` profile so all keys exist.
"""
from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Schema violation; the message names the offending key path."""


class DotDict(dict):
    """Nested dict with attribute access (read-only convenience)."""

    def __getattr__(self, key):
        try:
            value = self[key]
        except KeyError as exc:
            raise AttributeError(key) from exc
        return DotDict(value) if isinstance(value, dict) else value


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _profile_text(name: str) -> str:
    ref = resources.files("dgkd_lab").joinpath(f"profiles/{name}.yaml")
    if not ref.is_file():
        raise ConfigError(f"unknown profile {name!r}")
    return ref.read_text()


def load_profile(name: str) -> dict:
    return yaml.safe_load(_profile_text(name)) or {}


def load_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    includes = data.pop("include", [])
    merged: dict = {}
    for inc in includes:
        if isinstance(inc, str) and inc.startswith("profile:"):
            sub = load_profile(inc.split(":", 1)[1])
        else:
            sub = load_yaml(path.parent / inc)
        merged = deep_merge(merged, sub)
    return deep_merge(merged, data)


def set_by_path(cfg: dict, dotted: str, value):
    node = cfg
    keys = dotted.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot descend into non-mapping at {key!r} of {dotted!r}")
    node[keys[-1]] = value


def get_by_path(cfg: dict, dotted: str, default=None):
    node = cfg
    for key in dotted.split("."):
        if not isinstance(node, dict) or key not in node:
            return default
        node = node[key]
    return node


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    out = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        set_by_path(out, dotted, value)
    return out


def config_diff(a: dict, b: dict, prefix="") -> list:
    """Dotted paths whose values differ between two config trees."""
    paths = []
    keys = sorted(set(a) | set(b))
    for key in keys:
        dotted = f"{prefix}{key}"
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            paths.extend(config_diff(va, vb, prefix=dotted + "."))
        elif va != vb:
            paths.append(dotted)
    return paths


def to_plain(cfg) -> dict:
    return json.loads(json.dumps(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(to_plain(cfg), sort_keys=True).encode("utf-8")
    ).hexdigest()


def resolve_config(source) -> DotDict:
    """Resolve a config (path, or dict) against the toy-default profile."""
    if isinstance(source, (str, Path)):
        user = load_yaml(source)
    elif isinstance(source, dict):
        user = copy.deepcopy(dict(source))
    else:
        raise ConfigError(f"cannot resolve config from {type(source)}")
    return DotDict(deep_merge(load_profile("toy-default"), user))


def _require(cfg, dotted, types, pred=None, what=""):
    value = get_by_path(cfg, dotted, default=_MISSING)
    if value is _MISSING:
        raise ConfigError(f"missing config key: {dotted}")
    if not isinstance(value, types):
        raise ConfigError(f"{dotted}: expected {types}, got {type(value).__name__}")
    if pred is not None and not pred(value):
        raise ConfigError(f"{dotted}: {what} (got {value!r})")
    return value


_MISSING = object()
_BOOL = (bool,)
_NUM = (int, float)


def validate_config(cfg: dict) -> None:
    mode = _require(cfg, "run.mode", str, lambda v: v in ("teacher", "student"),
                    "must be 'teacher' or 'student'")
    _require(cfg, "run.seed", int)
    _require(cfg, "data.image_size", int, lambda v: v >= 32, "must be >= 32")
    _require(cfg, "data.num_classes", int, lambda v: v >= 2, "must be >= 2")
    _require(cfg, "data.train_count", int, lambda v: v >= 1, "must be >= 1")
    _require(cfg, "data.val_count", int, lambda v: v >= 1, "must be >= 1")
    _require(cfg, "train.steps", int, lambda v: v >= 1, "must be >= 1")
    _require(cfg, "train.batch_size", int, lambda v: v >= 1, "must be >= 1")
    _require(cfg, "train.lr", _NUM, lambda v: v > 0, "must be > 0")
    _require(cfg, "train.seg.confidence", _NUM, lambda v: 0 <= v <= 1, "must be in [0, 1]")
    _require(cfg, "train.seg.pamr_window", int, lambda v: v % 2 == 1, "must be odd")
    _require(cfg, "diffusion.t_train", int, lambda v: v >= 1, "must be >= 1")
    bs = _require(cfg, "diffusion.beta_start", _NUM)
    be = _require(cfg, "diffusion.beta_end", _NUM)
    if not (0 < bs <= be < 1):
        raise ConfigError("diffusion.beta_start/beta_end: require 0 < start <= end < 1")
    _require(cfg, "dgkd.enabled", _BOOL)
    taps = _require(cfg, "dgkd.taps", list)
    for tap in taps:
        if tap not in ("stage1", "stage2", "mask"):
            raise ConfigError(f"dgkd.taps: unknown tap {tap!r}")
    k = _require(cfg, "dgkd.ddim_steps", int, lambda v: v >= 1, "must be >= 1")
    t_enter = _require(cfg, "dgkd.t_enter", int, lambda v: v >= 1, "must be >= 1")
    if t_enter > get_by_path(cfg, "diffusion.t_train"):
        raise ConfigError("dgkd.t_enter: must not exceed diffusion.t_train")
    if k > t_enter:
        raise ConfigError("dgkd.ddim_steps: must not exceed dgkd.t_enter")
    _require(cfg, "dgf2.enabled", _BOOL)
    _require(cfg, "dgf2.lambda", _NUM, lambda v: 0 <= v <= 1, "must be in [0, 1]")
    stages = _require(cfg, "dgf2.stages", list)
    for stage in stages:
        if stage not in ("stage1", "stage2"):
            raise ConfigError(f"dgf2.stages: unknown stage {stage!r}")
    src = _require(cfg, "dgf2.depth_source", str)
    if src != "analytic":
        raise ConfigError("dgf2.depth_source: only 'analytic' is supported")
    if mode == "student" and get_by_path(cfg, "dgkd.enabled"):
        if not get_by_path(cfg, "teacher.checkpoint"):
            raise ConfigError(
                "teacher.checkpoint: dgkd.enabled student runs require a trained "
                "teacher checkpoint (missing dependency)"
            )
    weights = get_by_path(cfg, "dgkd.weights")
    if weights is not None:
        if not isinstance(weights, list) or len(weights) != len(taps):
            raise ConfigError("dgkd.weights: must be null or a list matching dgkd.taps")
