"""Command line entry points.

    dgkd-lab dataset synth  --out DIR [--config FILE]
    dgkd-lab dataset darken --in DIR --out DIR (--profile NAME | --config FILE)
    dgkd-lab train teacher|student --config FILE [--set key=value ...]
    dgkd-lab eval --checkpoint PT --data DIR [--stage-depth]
    dgkd-lab ablate --plan FILE --out DIR
    dgkd-lab report --run DIR [--run DIR ...] --out DIR

Exit codes: 0 ok, 2 config error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .config import ConfigError, load_yaml, resolve_config, to_plain, validate_config
from .lowlight import DarkenConfig, darken_corpus, get_profile
from .toyscene import load_corpus, synthesize_corpus

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _parse_set(values):
    overrides = {}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key] = yaml.safe_load(raw)
    return overrides


def cmd_dataset_synth(args):
    if args.config:
        cfg = to_plain(resolve_config(args.config))
    else:
        cfg = to_plain(resolve_config({}))
    from .harness.run import scene_spec_from_cfg

    spec = scene_spec_from_cfg(cfg)
    spec.validate()
    out = synthesize_corpus(spec, args.out, int(cfg["data"]["train_count"]),
                            int(cfg["data"]["val_count"]))
    print(f"wrote corpus to {out}")
    return EXIT_OK


def cmd_dataset_darken(args):
    if args.profile:
        dcfg = get_profile(args.profile)
    elif args.config:
        dcfg = DarkenConfig.from_dict(load_yaml(args.config))
    else:
        raise ConfigError("dataset darken: provide --profile or --config")
    src = Path(args.inp)
    out = Path(args.out)
    if (src / "manifest.json").exists():
        darken_corpus(src, dcfg, out)
    else:
        done = False
        for split in ("train", "val"):
            if (src / split / "manifest.json").exists():
                darken_corpus(src / split, dcfg, out / split)
                done = True
        if not done:
            raise ConfigError(f"no corpus manifest under {src}")
    print(f"wrote dark corpus to {out}")
    return EXIT_OK


def cmd_train(args, mode):
    from .config import set_by_path
    from .harness import run as run_experiment

    cfg = to_plain(resolve_config(args.config))
    cfg["run"]["mode"] = mode
    for key, value in _parse_set(args.set).items():
        set_by_path(cfg, key, value)
    validate_config(cfg)
    manifest = run_experiment(cfg, out_root=args.out)
    print(f"run {manifest.run_id}: {manifest.status}")
    print(json.dumps(manifest.metrics_summary.get("final_val", {}), indent=2))
    return EXIT_OK


def cmd_eval(args):
    import torch

    from .evalkit import ConfusionMatrix, accumulate, metrics
    from .wsss import load_checkpoint
    from .wsss.train import corpus_to_tensors

    net, dgf2, _ = load_checkpoint(args.checkpoint)
    net.eval()
    samples, _ = load_corpus(args.data)
    tensors = corpus_to_tensors(samples)
    cm = ConfusionMatrix(net.num_classes)
    with torch.no_grad():
        for i in range(0, len(samples), 64):
            x = tensors["images"][i : i + 64]
            depth = tensors["depth"][i : i + 64] if dgf2 is not None else None
            out = net(x, dgf2=dgf2, depth=depth)
            pred = out["logits"].argmax(dim=1)
            accumulate(cm, pred.numpy(), tensors["masks"][i : i + 64].numpy())
    result = metrics(cm)
    print(f"{'class':<12} {'IoU':>8}")
    for name, iou in result["per_class_iou"].items():
        print(f"{name:<12} {('-' if iou is None else f'{iou:8.4f}')}")
    print(f"{'mIoU':<12} {result['miou']:8.4f}")
    print(f"{'PixAcc':<12} {result['pixacc']:8.4f}")
    return EXIT_OK


def cmd_ablate(args):
    from .harness import ablate

    out = ablate(args.plan, args.out, runs_root=args.runs_root)
    print(f"ablation report in {out}")
    return EXIT_OK


def cmd_report(args):
    from .harness import report

    out = report(args.run, args.out)
    print(f"report in {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="dgkd-lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_dataset = sub.add_parser("dataset", help="corpus synthesis and darkening")
    dsub = p_dataset.add_subparsers(dest="dataset_command", required=True)
    p_synth = dsub.add_parser("synth")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--config")
    p_synth.set_defaults(func=cmd_dataset_synth)
    p_darken = dsub.add_parser("darken")
    p_darken.add_argument("--in", dest="inp", required=True)
    p_darken.add_argument("--out", required=True)
    p_darken.add_argument("--profile")
    p_darken.add_argument("--config")
    p_darken.set_defaults(func=cmd_dataset_darken)

    p_train = sub.add_parser("train", help="train the teacher or the student")
    tsub = p_train.add_subparsers(dest="train_command", required=True)
    for mode in ("teacher", "student"):
        p = tsub.add_parser(mode)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        p.set_defaults(func=lambda args, mode=mode: cmd_train(args, mode))

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="corpus split directory")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run an ablation plan")
    p_ablate.add_argument("--plan", required=True)
    p_ablate.add_argument("--out", required=True)
    p_ablate.add_argument("--runs-root", default=None)
    p_ablate.set_defaults(func=cmd_ablate)

    p_report = sub.add_parser("report", help="render reports for finished runs")
    p_report.add_argument("--run", action="append", required=True, help="run directory")
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
