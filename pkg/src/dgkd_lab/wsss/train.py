"""Teacher and student training loops.

The teacher trains on normal-light images with the classification and
self-supervised segmentation losses. The student trains on the dark twin of
the same corpus; when distillation is enabled the frozen teacher consumes
the paired normal-light image each step and per-tap denoisers distill the
student features and mask logits against the teacher's. The overall loss is
the plain sum of all parts, reported additively step by step."""
from __future__ import annotations

import numpy as np
import torch
from torch.optim import SGD

from ..config import config_hash, to_plain
from ..dgkd import DistillTap, dgkd_step, hierarchical_weights
from ..dgf2 import Dgf2Bank
from ..diffusion import NoisePredictor, make_plan, make_schedule
from ..evalkit import ConfusionMatrix, accumulate, metrics
from ..seeding import np_rng, seed_torch_init, torch_generator
from .cams import cams_from_scores, pseudo_mask_from_cams
from .losses import LossReport, classification_loss, self_sup_seg_loss
from .segnet import MASK_TAP, SegNet, build_segnet

CHECKPOINT_VERSION = 1
_TAP_KEYS = {"stage1": "stage1", "stage2": "stage2", "mask": MASK_TAP}


def corpus_to_tensors(samples, device="cpu"):
    images = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1))) for s in samples]
    ).to(device)
    labels = torch.stack([torch.from_numpy(s.label_vec.astype(np.float32)) for s in samples]).to(device)
    masks = torch.stack([torch.from_numpy(s.gt_mask.astype(np.int64)) for s in samples]).to(device)
    depth = torch.stack([torch.from_numpy(s.depth.astype(np.float32)) for s in samples]).to(device)
    ids = [int(s.sample_id) for s in samples]
    return {"images": images, "labels": labels, "masks": masks, "depth": depth, "ids": ids}


def check_pairing(normal, dark):
    if normal["ids"] != dark["ids"]:
        raise ValueError("normal/dark corpora are not paired index-for-index (sample ids differ)")
    if normal["images"].shape != dark["images"].shape:
        raise ValueError("normal/dark corpora have mismatched image shapes")


@torch.no_grad()
def evaluate_model(net, images, gt_masks, num_classes, batch_size=64, dgf2=None, depth=None):
    net.eval()
    cm = ConfusionMatrix(num_classes)
    for i in range(0, len(images), batch_size):
        x = images[i : i + batch_size]
        d = depth[i : i + batch_size] if depth is not None else None
        out = net(x, dgf2=dgf2, depth=d)
        pred = out["logits"].argmax(dim=1)
        accumulate(cm, pred.cpu().numpy(), gt_masks[i : i + batch_size].cpu().numpy())
    net.train()
    return metrics(cm)


@torch.no_grad()
def classification_accuracy(net, images, labels, batch_size=64, dgf2=None, depth=None):
    """Mean per-(sample, class) accuracy of thresholded image-level scores."""
    net.eval()
    hits = 0
    total = 0
    for i in range(0, len(images), batch_size):
        x = images[i : i + batch_size]
        d = depth[i : i + batch_size] if depth is not None else None
        out = net(x, dgf2=dgf2, depth=d)
        pred = (torch.sigmoid(out["cls_scores"]) > 0.5).float()
        hits += (pred == labels[i : i + batch_size]).sum().item()
        total += pred.numel()
    net.train()
    return hits / max(total, 1)


def _make_pseudo_masks(out, images, labels, seg_cfg, bg_power, step):
    ignore = int(seg_cfg["ignore_label"])
    if step <= int(seg_cfg["warmup_steps"]):
        return torch.full(images.shape[:1] + images.shape[-2:], ignore,
                          dtype=torch.long, device=images.device)
    with torch.no_grad():
        cams = cams_from_scores(out["logits"][:, 1:].detach(), labels, bg_power)
        return pseudo_mask_from_cams(
            cams, images,
            confidence=float(seg_cfg["confidence"]), ignore_label=ignore,
            pamr_iters=int(seg_cfg["pamr_iters"]), pamr_window=int(seg_cfg["pamr_window"]),
            pamr_tau=float(seg_cfg["pamr_tau"]),
        )


def _build_predictors(cfg, stage_channels, seed):
    predictors = {}
    for tap in cfg["dgkd"]["taps"]:
        key = _TAP_KEYS[tap]
        seed_torch_init(seed, "init", "predictor", tap)
        predictors[tap] = NoisePredictor(stage_channels[key])
    return predictors


def _build_taps(cfg, predictors, teacher_out, student_out):
    distance_cfg = cfg["dgkd"]["distance"]
    taps = []
    for tap in cfg["dgkd"]["taps"]:
        key = _TAP_KEYS[tap]
        location = MASK_TAP if tap == "mask" else tap
        distance = distance_cfg["mask"] if tap == "mask" else distance_cfg["feature"]
        taps.append(
            DistillTap(
                name=tap,
                location=location,
                teacher_feature=teacher_out[key],
                student_feature=student_out[key],
                predictor=predictors[tap],
                distance=distance,
            )
        )
    return taps


class TrainResult:
    def __init__(self, net, dgf2, predictors, loss_history, metric_records, optimizer=None):
        self.net = net
        self.dgf2 = dgf2
        self.predictors = predictors
        self.loss_history = loss_history
        self.metric_records = metric_records
        self.optimizer = optimizer


def _train(cfg, inputs, teacher=None, on_record=None):
    """Shared loop. `inputs` carries the tensors the mode needs:
    teacher mode: train/val on normal images;
    student mode: paired normal+dark train tensors, dark val tensors."""
    mode = cfg["run"]["mode"]
    seed = int(cfg["run"]["seed"])
    device = cfg["run"].get("device", "cpu")
    num_classes = int(cfg["data"]["num_classes"])
    tcfg = cfg["train"]
    seg_cfg = tcfg["seg"]
    bg_power = float(cfg["model"]["bg_power"])
    steps = int(tcfg["steps"])
    batch_size = int(tcfg["batch_size"])
    eval_every = int(tcfg["eval_every"])

    net = build_segnet(num_classes, int(cfg["model"]["c1"]), int(cfg["model"]["c2"]),
                       seed, "init", mode).to(device)
    params = list(net.parameters())

    dgf2 = None
    if mode == "student" and cfg["dgf2"]["enabled"]:
        seed_torch_init(seed, "init", "dgf2")
        dgf2 = Dgf2Bank(net.stage_channels, cfg["dgf2"]["stages"],
                        lam=float(cfg["dgf2"]["lambda"])).to(device)
        params += list(dgf2.parameters())

    predictors = {}
    dgkd_on = mode == "student" and cfg["dgkd"]["enabled"] and cfg["dgkd"]["taps"]
    if dgkd_on:
        if teacher is None:
            raise ValueError("dgkd-enabled student training requires a teacher network")
        predictors = _build_predictors(cfg, net.stage_channels, seed)
        for p in predictors.values():
            p.to(device)
            params += list(p.parameters())
        sched = make_schedule(int(cfg["diffusion"]["t_train"]),
                              float(cfg["diffusion"]["beta_start"]),
                              float(cfg["diffusion"]["beta_end"]))
        plan = make_plan(int(cfg["dgkd"]["t_enter"]), int(cfg["dgkd"]["ddim_steps"]))
        generators = {tap: torch_generator(seed, "diffusion", tap) for tap in cfg["dgkd"]["taps"]}
        weights = hierarchical_weights(len(cfg["dgkd"]["taps"]), cfg["dgkd"]["weights"])

    if teacher is not None:
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)

    base_lr = float(tcfg["lr"])
    lr_warmup = int(tcfg.get("lr_warmup_steps", 0))
    grad_clip = float(tcfg.get("grad_clip", 0.0))
    opt = SGD(params, lr=base_lr, momentum=float(tcfg["momentum"]),
              weight_decay=float(tcfg["weight_decay"]))

    data_rng = np_rng(seed, "data")
    augment = str(tcfg.get("augment", "none"))
    aug_rng = np_rng(seed, "augment") if augment == "flip" else None
    n_train = len(inputs["train_images"])
    loss_history = []
    metric_records = []

    def run_eval(step):
        val = evaluate_model(net, inputs["val_images"], inputs["val_masks"], num_classes,
                             dgf2=dgf2, depth=inputs.get("val_depth"))
        rec = {"step": step, "split": "val", **val}
        metric_records.append(rec)
        if on_record:
            on_record("metric", rec)
        tr = evaluate_model(net, inputs["train_images"], inputs["train_masks"], num_classes,
                            dgf2=dgf2, depth=inputs.get("train_depth"))
        tr["cls_acc"] = classification_accuracy(net, inputs["train_images"], inputs["train_labels"],
                                                dgf2=dgf2, depth=inputs.get("train_depth"))
        rec = {"step": step, "split": "train", **tr}
        metric_records.append(rec)
        if on_record:
            on_record("metric", rec)

    for step in range(1, steps + 1):
        if lr_warmup > 0:
            scale = min(1.0, step / lr_warmup)
            for group in opt.param_groups:
                group["lr"] = base_lr * scale
        idx = data_rng.choice(n_train, size=min(batch_size, n_train), replace=False)
        idx = torch.from_numpy(np.ascontiguousarray(idx))
        x = inputs["train_images"][idx]
        labels = inputs["train_labels"][idx]
        depth = inputs["train_depth"][idx] if inputs.get("train_depth") is not None else None
        x_normal = inputs["train_images_normal"][idx] if dgkd_on else None

        if aug_rng is not None:
            # paired horizontal flips keep dark/normal/depth pixel-aligned
            flip = torch.from_numpy(aug_rng.random(len(idx)) < 0.5)
            if bool(flip.any()):
                x = x.clone()
                x[flip] = torch.flip(x[flip], dims=[-1])
                if depth is not None:
                    depth = depth.clone()
                    depth[flip] = torch.flip(depth[flip], dims=[-1])
                if x_normal is not None:
                    x_normal = x_normal.clone()
                    x_normal[flip] = torch.flip(x_normal[flip], dims=[-1])

        out = net(x, dgf2=dgf2, depth=depth)
        l_cls = classification_loss(out["cls_scores"], labels)
        pm = _make_pseudo_masks(out, x, labels, seg_cfg, bg_power, step)
        l_seg = self_sup_seg_loss(out["logits"], pm, ignore_label=int(seg_cfg["ignore_label"]),
                                  class_balance=bool(seg_cfg.get("class_balance", False)))

        if dgkd_on:
            with torch.no_grad():
                teacher_out = teacher(x_normal)
            taps = _build_taps(cfg, predictors, teacher_out, out)
            kd = dgkd_step(taps, sched, plan, generators)
            total = l_cls + l_seg + kd.total(weights)
            report = LossReport.build(
                step, l_cls.item(), l_seg.item(),
                l_diff=[kd.loss_diff[t].item() for t in cfg["dgkd"]["taps"]],
                l_kd=[kd.loss_kd[t].item() for t in cfg["dgkd"]["taps"]],
                weights=weights,
            )
        else:
            total = l_cls + l_seg
            report = LossReport.build(step, l_cls.item(), l_seg.item())

        if not torch.isfinite(total):
            raise RuntimeError(f"training diverged at step {step}: non-finite loss {total}")

        opt.zero_grad()
        total.backward()
        if grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
        opt.step()

        loss_history.append(report)
        if on_record:
            on_record("loss", report.to_dict())
        if step % eval_every == 0 or step == steps:
            run_eval(step)

    return TrainResult(net, dgf2, predictors, loss_history, metric_records, optimizer=opt)


def train_teacher(cfg, train_samples, val_samples, on_record=None) -> TrainResult:
    device = cfg["run"].get("device", "cpu")
    train = corpus_to_tensors(train_samples, device)
    val = corpus_to_tensors(val_samples, device)
    inputs = {
        "train_images": train["images"], "train_labels": train["labels"],
        "train_masks": train["masks"], "train_depth": None,
        "val_images": val["images"], "val_masks": val["masks"], "val_depth": None,
    }
    return _train(cfg, inputs, teacher=None, on_record=on_record)


def train_student(cfg, normal_train, dark_train, dark_val, teacher=None, on_record=None) -> TrainResult:
    device = cfg["run"].get("device", "cpu")
    normal = corpus_to_tensors(normal_train, device)
    dark = corpus_to_tensors(dark_train, device)
    check_pairing(normal, dark)
    val = corpus_to_tensors(dark_val, device)
    use_depth = bool(cfg["dgf2"]["enabled"])
    inputs = {
        "train_images": dark["images"], "train_labels": dark["labels"],
        "train_masks": dark["masks"],
        "train_depth": dark["depth"] if use_depth else None,
        "train_images_normal": normal["images"],
        "val_images": val["images"], "val_masks": val["masks"],
        "val_depth": val["depth"] if use_depth else None,
    }
    return _train(cfg, inputs, teacher=teacher, on_record=on_record)


def save_checkpoint(path, cfg, result: TrainResult, step):
    dgf2_meta = None
    if result.dgf2 is not None:
        dgf2_meta = {"stages": list(result.dgf2.stages), "lambda": result.dgf2.lam}
    payload = {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "config_hash": config_hash(to_plain(cfg)),
        "num_classes": result.net.num_classes,
        "c1": result.net.c1,
        "c2": result.net.c2,
        "model": result.net.state_dict(),
        "dgf2": result.dgf2.state_dict() if result.dgf2 is not None else None,
        "dgf2_meta": dgf2_meta,
        "predictors": {k: v.state_dict() for k, v in result.predictors.items()},
        "optimizer": result.optimizer.state_dict() if result.optimizer is not None else None,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, device="cpu"):
    """Restore (net, dgf2_bank_or_None, payload) from a checkpoint file."""
    payload = torch.load(path, map_location=device, weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    net = SegNet(payload["num_classes"], c1=payload["c1"], c2=payload["c2"])
    net.load_state_dict(payload["model"])
    net.to(device)
    dgf2 = None
    if payload.get("dgf2") is not None:
        meta = payload["dgf2_meta"]
        dgf2 = Dgf2Bank(net.stage_channels, meta["stages"], lam=meta["lambda"])
        dgf2.load_state_dict(payload["dgf2"])
        dgf2.to(device)
    return net, dgf2, payload


def load_segnet(path, device="cpu") -> SegNet:
    net, _, _ = load_checkpoint(path, device)
    return net
