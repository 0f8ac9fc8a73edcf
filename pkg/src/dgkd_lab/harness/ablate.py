"""Ablation runner: execute a plan of config variants across seeds, check
that each variant differs from the base config only in its declared keys,
and emit a summary table, per-variant curves, and a machine-readable
summary."""
from __future__ import annotations

import json
import statistics
from pathlib import Path

import yaml

from ..config import (ConfigError, apply_overrides, config_diff, load_yaml,
                      resolve_config, to_plain, validate_config)
from .run import run

# keys the runner itself is allowed to touch beyond a variant's declared overrides
_RUNNER_KEYS = {"run.seed", "run.run_id", "teacher.checkpoint"}


def load_plan(path) -> dict:
    path = Path(path)
    plan = yaml.safe_load(path.read_text())
    if not isinstance(plan, dict):
        raise ConfigError(f"plan root must be a mapping: {path}")
    if "base_config" in plan:
        plan["base"] = load_yaml(path.parent / plan["base_config"])
    plan.setdefault("base", {})
    plan.setdefault("seeds", [0])
    if not plan.get("variants"):
        raise ConfigError("plan.variants: at least one variant is required")
    for variant in plan["variants"]:
        if "name" not in variant:
            raise ConfigError("plan.variants: every variant needs a name")
        variant.setdefault("overrides", {})
    plan.setdefault("sweeps", [])
    return plan


def _variant_config(base_cfg, overrides, seed, run_id, teacher_ckpt=None):
    cfg = apply_overrides(base_cfg, overrides)
    cfg = apply_overrides(cfg, {"run.seed": int(seed), "run.run_id": run_id})
    if teacher_ckpt is not None:
        cfg = apply_overrides(cfg, {"teacher.checkpoint": str(teacher_ckpt)})
    diff = set(config_diff(base_cfg, cfg))
    declared = set(overrides) | _RUNNER_KEYS
    extra = diff - declared
    if extra:
        raise ConfigError(f"variant config drifted beyond declared overrides: {sorted(extra)}")
    return cfg


def _median(xs):
    return statistics.median(xs) if xs else None


def _mean_std(xs):
    if not xs:
        return None, None
    if len(xs) == 1:
        return xs[0], 0.0
    return statistics.fmean(xs), statistics.stdev(xs)


def _summarize(per_seed):
    ok = {s: r for s, r in per_seed.items() if r.get("status") == "ok"}
    mious = [r["final_val"]["miou"] for r in ok.values()]
    pixaccs = [r["final_val"]["pixacc"] for r in ok.values()]
    mean, std = _mean_std(mious)
    decomp = {"l_cls": [], "l_seg": [], "sum_l_diff": [], "sum_l_kd": [], "l_overall": []}
    for r in ok.values():
        fl = r["final_loss"]
        decomp["l_cls"].append(fl["l_cls"])
        decomp["l_seg"].append(fl["l_seg"])
        decomp["sum_l_diff"].append(sum(fl["l_diff"]))
        decomp["sum_l_kd"].append(sum(fl["l_kd"]))
        decomp["l_overall"].append(fl["l_overall"])
    return {
        "seeds": per_seed,
        "median_miou": _median(mious),
        "mean_miou": mean,
        "std_miou": std,
        "median_pixacc": _median(pixaccs),
        "loss_decomposition": {k: (_mean_std(v)[0] if v else None) for k, v in decomp.items()},
    }


def _run_one(cfg, out_root):
    try:
        manifest = run(cfg, out_root=out_root)
        return {
            "status": "ok",
            "run_id": manifest.run_id,
            "final_val": manifest.metrics_summary["final_val"],
            "final_loss": manifest.metrics_summary["final_loss"],
        }
    except Exception as exc:  # failed variants are reported, others proceed
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def ablate(plan, out_dir, runs_root=None) -> Path:
    """Run every variant x seed of a plan (plus sweeps) and write the report
    directory with summary.json, ablation.md, and curve plots."""
    if isinstance(plan, (str, Path)):
        plan = load_plan(plan)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs_root = Path(runs_root) if runs_root is not None else out_dir / "runs"

    base_cfg = to_plain(resolve_config(plan["base"]))
    seeds = [int(s) for s in plan["seeds"]]
    variants = plan["variants"]

    teacher_variants = [
        v for v in variants
        if apply_overrides(base_cfg, v["overrides"])["run"]["mode"] == "teacher"
    ]
    teacher_name = teacher_variants[0]["name"] if teacher_variants else None

    results = {v["name"]: {} for v in variants}
    teacher_ckpts = {}
    for seed in seeds:
        for variant in variants:
            name = variant["name"]
            needs_teacher = apply_overrides(base_cfg, variant["overrides"]).get(
                "dgkd", {}).get("enabled", False)
            ckpt = teacher_ckpts.get(seed) if needs_teacher else None
            if needs_teacher and ckpt is None:
                results[name][seed] = {
                    "status": "failed",
                    "error": "no teacher checkpoint available for this seed",
                }
                continue
            run_id = f"{name}-s{seed}"
            cfg = _variant_config(base_cfg, variant["overrides"], seed, run_id, ckpt)
            validate_config(cfg)
            outcome = _run_one(cfg, runs_root)
            results[name][seed] = outcome
            if outcome["status"] == "ok" and name == teacher_name:
                teacher_ckpts[seed] = runs_root / run_id / "checkpoint.pt"

    sweep_results = {}
    for sweep in plan.get("sweeps", []):
        sweep_name = sweep["name"]
        base_variant = next(v for v in variants if v["name"] == sweep["base_variant"])
        sweep_seeds = [int(s) for s in sweep.get("seeds", seeds)]
        rows = {}
        for value in sweep["values"]:
            per_seed = {}
            for seed in sweep_seeds:
                overrides = dict(base_variant["overrides"])
                overrides[sweep["key"]] = value
                needs_teacher = apply_overrides(base_cfg, overrides).get(
                    "dgkd", {}).get("enabled", False)
                ckpt = teacher_ckpts.get(seed) if needs_teacher else None
                if needs_teacher and ckpt is None:
                    per_seed[seed] = {"status": "failed",
                                      "error": "no teacher checkpoint available for this seed"}
                    continue
                run_id = f"{sweep_name}-{value}-s{seed}"
                cfg = _variant_config(base_cfg, overrides, seed, run_id, ckpt)
                validate_config(cfg)
                per_seed[seed] = _run_one(cfg, runs_root)
            rows[str(value)] = _summarize(per_seed)
        sweep_results[sweep_name] = {
            "key": sweep["key"],
            "rows": rows,
            "reference": sweep.get("reference"),
        }

    summary = {
        "seeds": seeds,
        "variants": {name: _summarize(per_seed) for name, per_seed in results.items()},
        "sweeps": sweep_results,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _write_markdown(summary, variants, out_dir / "ablation.md")
    _plot_curves(results, runs_root, out_dir / "val_miou_curves.png")
    return out_dir


def _fmt(x, nd=3):
    return "-" if x is None else f"{x:.{nd}f}"


def _write_markdown(summary, variants, path):
    lines = ["# Ablation report", "", "## Variants", ""]
    header = ("| variant | median mIoU | mean±std mIoU | median PixAcc | per-seed mIoU | "
              "l_cls | l_seg | sum l_diff | sum l_kd |")
    lines += [header, "|" + "---|" * 9]
    for variant in variants:
        name = variant["name"]
        s = summary["variants"][name]
        per_seed = []
        for seed, r in sorted(s["seeds"].items()):
            if r["status"] == "ok":
                per_seed.append(f"s{seed}:{r['final_val']['miou']:.3f}")
            else:
                per_seed.append(f"s{seed}:FAILED")
        mean_std = "-"
        if s["mean_miou"] is not None:
            mean_std = f"{s['mean_miou']:.3f}±{s['std_miou']:.3f}"
        d = s["loss_decomposition"]
        lines.append(
            f"| {name} | {_fmt(s['median_miou'])} | {mean_std} | {_fmt(s['median_pixacc'])} "
            f"| {' '.join(per_seed)} | {_fmt(d['l_cls'])} | {_fmt(d['l_seg'])} "
            f"| {_fmt(d['sum_l_diff'])} | {_fmt(d['sum_l_kd'])} |"
        )
    for sweep_name, sweep in summary["sweeps"].items():
        lines += ["", f"## Sweep: {sweep_name} ({sweep['key']})", ""]
        ref = sweep.get("reference")
        ref_header = f" {ref['label']} |" if ref else ""
        lines.append(f"| {sweep['key']} | median mIoU | median PixAcc |{ref_header}")
        lines.append("|" + "---|" * (4 if ref else 3))
        ref_values = ref["values"] if ref else []
        for i, (value, row) in enumerate(sweep["rows"].items()):
            ref_cell = f" {ref_values[i]} (not an acceptance target) |" if ref else ""
            lines.append(
                f"| {value} | {_fmt(row['median_miou'])} | {_fmt(row['median_pixacc'])} |{ref_cell}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def _plot_curves(results, runs_root, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, per_seed in results.items():
        for seed, outcome in sorted(per_seed.items()):
            if outcome.get("status") != "ok":
                continue
            metrics_path = Path(runs_root) / outcome["run_id"] / "metrics.jsonl"
            steps, mious = [], []
            for line in metrics_path.read_text().splitlines():
                rec = json.loads(line)
                if rec["split"] == "val":
                    steps.append(rec["step"])
                    mious.append(rec["miou"])
            ax.plot(steps, mious, label=f"{name} s{seed}", alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("val mIoU")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
