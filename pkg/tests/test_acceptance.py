"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line
(run with -s to see them stream)."""
import json
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn
import yaml

from dgkd_lab.config import resolve_config, to_plain
from dgkd_lab.dgf2 import consistency_attention, consistency_fuse, sft_modulate
from dgkd_lab.dgkd import DistillTap, dgkd_step, frozen_params, kd_distance
from dgkd_lab.diffusion import (DdimPlan, NoisePredictor, ddim_denoise,
                                diffusion_loss, forward_chain, forward_sample,
                                make_plan, make_schedule)
from dgkd_lab.evalkit import ConfusionMatrix, accumulate, metrics
from dgkd_lab.gradcheck import check_gradients
from dgkd_lab.harness import ablate
from dgkd_lab.harness.manifest import corpus_hash
from dgkd_lab.lowlight import (LUMINANCE_BANDS, darken, darken_corpus,
                               get_profile, luminance_ratio)
from dgkd_lab.toyscene import SceneSpec, generate_corpus, load_corpus
from dgkd_lab.wsss import (classification_loss, evaluate_model, load_segnet,
                           self_sup_seg_loss, train_student)
from dgkd_lab.wsss.train import corpus_to_tensors

REPO = Path(__file__).resolve().parent.parent
LADDER_PLAN = REPO / "configs" / "ablation-ladder.yaml"

DEFAULT_SCHED = make_schedule(100, 1e-3, 0.2)


def _criterion(num, name, ok, detail=""):
    print(f"\n[acceptance] criterion {num} ({name}): {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


class OraclePredictor(nn.Module):
    def __init__(self, z0, sched=DEFAULT_SCHED):
        super().__init__()
        self.z0 = z0
        self.sched = sched

    def forward(self, z, t):
        ab = float(self.sched.alpha_bar[t])
        return (z - math.sqrt(ab) * self.z0) / math.sqrt(1.0 - ab)


# --------------------------------------------------------------- criterion 1

def test_criterion_1_diffusion_moment_equivalence():
    start = time.time()
    n = 10_000
    failures = []
    for i in range(3):
        gen = torch.Generator().manual_seed(100 + i)
        z0 = torch.randn(8, 4, 4, generator=gen, dtype=torch.float64)
        n_elem = z0.numel()
        for t in (1, 10, 50):
            batch = z0.expand((n,) + tuple(z0.shape))
            zt = forward_chain(batch, t, DEFAULT_SCHED, seed=7000 + 10 * i + t)
            ab = float(DEFAULT_SCHED.alpha_bar[t])
            mean_err = float((zt.mean(dim=0) - math.sqrt(ab) * z0).mean())
            se_mean = math.sqrt((1 - ab) / (n * n_elem))
            var_err = float(zt.var(dim=0, unbiased=True).mean()) - (1 - ab)
            se_var = math.sqrt(2 * (1 - ab) ** 2 / ((n - 1) * n_elem))
            if abs(mean_err) > 3 * se_mean or abs(var_err) > 3 * se_var:
                failures.append((i, t, mean_err / se_mean, var_err / se_var))
    elapsed = time.time() - start
    ok = not failures and elapsed < 120
    _criterion(1, "diffusion moment equivalence", ok,
               f"failures={failures} elapsed={elapsed:.1f}s")


# --------------------------------------------------------------- criterion 2

def test_criterion_2_ddim_determinism_and_inversion():
    torch.manual_seed(0)
    pred = NoisePredictor(4)
    z = torch.randn(2, 4, 8, 8)
    plan = make_plan(20, 5)
    with torch.no_grad():
        repro = float((ddim_denoise(z, pred, DEFAULT_SCHED, plan)
                       - ddim_denoise(z, pred, DEFAULT_SCHED, plan)).abs().max())

    gen = torch.Generator().manual_seed(1)
    z0 = torch.randn(2, 4, 4, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
    zt, _ = forward_sample(z0, 50, DEFAULT_SCHED, eps)
    out = ddim_denoise(zt, OraclePredictor(z0), DEFAULT_SCHED, DdimPlan(tau=(50,)))
    inv = float((out - z0).abs().max())
    ok = repro <= 1e-12 and inv <= 1e-6
    _criterion(2, "ddim determinism and inversion",
               ok, f"repro={repro:.2e} inversion={inv:.2e}")


# --------------------------------------------------------------- criterion 3

def test_criterion_3_gradient_suite():
    start = time.time()
    errors = {}
    torch.manual_seed(0)

    # noise-prediction loss, parameters and clean features
    pred = NoisePredictor(2).double()
    nn.init.normal_(pred.conv2.weight, std=0.1)
    z0 = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    errors.update(check_gradients(
        lambda: diffusion_loss(pred, z0, DEFAULT_SCHED, torch.Generator().manual_seed(5)),
        {"diff_z0": z0, "diff_conv1": pred.conv1.weight, "diff_conv2": pred.conv2.weight},
        eps=1e-6, threshold=1e-3))

    # distillation distances through the frozen reverse chain
    plan = make_plan(20, 3)
    for kind in ("mse", "kl_div"):
        torch.manual_seed(1)
        kd_pred = NoisePredictor(3).double()
        nn.init.normal_(kd_pred.conv2.weight, std=0.1)
        teacher = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        student = torch.randn(1, 3, 4, 4, dtype=torch.float64)

        def kd_loss():
            with frozen_params(kd_pred):
                denoised = ddim_denoise(student, kd_pred, DEFAULT_SCHED, plan)
            return kd_distance(denoised, teacher, kind)

        errors.update(check_gradients(kd_loss, {f"kd_{kind}_student": student},
                                      eps=1e-6, threshold=1e-3))

    # modulation and fusion
    fd = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    beta = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    gamma = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    proj = torch.randn(1, 2, 4, 4, dtype=torch.float64)

    def fuse_loss():
        geo = sft_modulate(fd, beta, gamma)
        return (consistency_fuse(fd, geo, 0.5) * proj).sum()

    errors.update(check_gradients(fuse_loss, {"fuse_fd": fd, "fuse_beta": beta,
                                              "fuse_gamma": gamma},
                                  eps=1e-6, threshold=1e-3))

    # classification and self-supervised segmentation losses
    scores = torch.randn(2, 3, dtype=torch.float64)
    labels = (torch.rand(2, 3) > 0.5).double()
    errors.update(check_gradients(lambda: classification_loss(scores, labels),
                                  {"cls_scores": scores}, eps=1e-6, threshold=1e-3))
    logits = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    mask = torch.randint(0, 4, (1, 8, 8))
    mask[0, :2, :] = 255
    errors.update(check_gradients(lambda: self_sup_seg_loss(logits, mask),
                                  {"seg_logits": logits}, eps=1e-6, threshold=1e-3))

    elapsed = time.time() - start
    worst = max(errors.values())
    ok = worst < 1e-3 and elapsed < 180
    _criterion(3, "gradient suite", ok,
               f"worst_rel_err={worst:.2e} elapsed={elapsed:.1f}s")


# --------------------------------------------------------------- criterion 4

def test_criterion_4_formula_oracles():
    checks = []

    zero = torch.zeros(1, 1, 2, 2)
    checks.append(torch.equal(consistency_attention(zero, zero, 0.5),
                              torch.full_like(zero, 0.375)))
    checks.append(torch.equal(consistency_fuse(zero, zero, 0.5), zero))
    big = torch.full((1, 1, 2, 2), 1e4)
    checks.append(bool(torch.allclose(consistency_fuse(big, 2 * big, 0.0),
                                      2 * big + big + 2 * big)))

    logits = torch.linspace(-30.0, 30.0, 61)
    a, b = torch.meshgrid(logits, logits, indexing="ij")
    grid_ok = True
    for lam in np.linspace(0.0, 1.0, 11):
        att = consistency_attention(a, b, float(lam))
        grid_ok &= float(att.min()) >= 0.0 and float(att.max()) <= 1.0
    checks.append(grid_ok)

    x = torch.tensor([[1.0, -2.0], [0.0, 3.0]]).view(1, 1, 2, 2)
    beta = torch.tensor([[2.0, 1.0], [0.5, 1.0]]).view(1, 1, 2, 2)
    gamma = torch.tensor([[0.0, 1.0], [1.0, -1.0]]).view(1, 1, 2, 2)
    expected = torch.tensor([[2.0, -1.0], [1.0, 2.0]]).view(1, 1, 2, 2)
    checks.append(torch.equal(sft_modulate(x, beta, gamma), expected))
    checks.append(torch.equal(sft_modulate(x, torch.ones_like(x), torch.zeros_like(x)), x))
    gen = torch.Generator().manual_seed(0)
    xi = torch.randint(-8, 8, (1, 2, 3, 3), generator=gen).float()
    yi = torch.randint(-8, 8, (1, 2, 3, 3), generator=gen).float()
    bi = torch.randint(-4, 4, (1, 2, 3, 3), generator=gen).float()
    gi = torch.randint(-4, 4, (1, 2, 3, 3), generator=gen).float()
    checks.append(torch.equal(sft_modulate(xi, bi, gi) - sft_modulate(yi, bi, gi),
                              bi * (xi - yi)))

    rng = np.random.default_rng(1)
    metrics_ok = True
    for _ in range(5):
        gt = rng.integers(0, 4, (16, 16))
        pred = rng.integers(0, 4, (16, 16))
        cm = ConfusionMatrix(3)
        accumulate(cm, pred, gt)
        m = metrics(cm)
        ious = []
        for c in range(4):
            union = int(((pred == c) | (gt == c)).sum())
            if union:
                ious.append(int(((pred == c) & (gt == c)).sum()) / union)
        metrics_ok &= m["miou"] == float(np.mean(ious))
        metrics_ok &= m["pixacc"] == float((pred == gt).mean())
    checks.append(metrics_ok)

    ok = all(checks)
    _criterion(4, "formula oracles", ok, f"checks={checks}")


# --------------------------------------------------------------- criterion 5

def test_criterion_5_stop_gradient_discipline():
    torch.manual_seed(0)
    plan = make_plan(20, 3)
    teacher = torch.randn(1, 4, 6, 6, requires_grad=True)
    student = torch.randn(1, 4, 6, 6, requires_grad=True)
    pred = NoisePredictor(4)
    tap = DistillTap("stage1", "stage1", teacher, student, pred)
    gens = {"stage1": torch.Generator().manual_seed(3)}
    out = dgkd_step([tap], DEFAULT_SCHED, plan, gens)

    out.loss_kd["stage1"].backward(retain_graph=True)
    kd_into_pred = any(p.grad is not None and float(p.grad.abs().max()) > 0
                       for p in pred.parameters())
    kd_into_student = student.grad is not None and float(student.grad.abs().max()) > 0
    student.grad = None
    out.loss_diff["stage1"].backward()
    diff_into_student = student.grad is not None and float(student.grad.abs().max()) > 0
    diff_into_pred = any(p.grad is not None and float(p.grad.abs().max()) > 0
                         for p in pred.parameters())
    teacher_grad = teacher.grad is not None and float(teacher.grad.abs().max()) > 0

    # perturbation cross-check: student feature cannot move loss_diff
    def losses_at(feat):
        t = DistillTap("s", "stage1", teacher.detach(), feat, pred)
        o = dgkd_step([t], DEFAULT_SCHED, plan, {"s": torch.Generator().manual_seed(11)})
        return float(o.loss_diff["s"]), float(o.loss_kd["s"])

    d0, k0 = losses_at(torch.zeros(1, 4, 6, 6))
    d1, k1 = losses_at(torch.full((1, 4, 6, 6), 0.5))
    ok = (not teacher_grad and not kd_into_pred and kd_into_student
          and diff_into_pred and not diff_into_student
          and d0 == d1 and k0 != k1)
    _criterion(5, "stop-gradient discipline", ok,
               f"teacher_grad={teacher_grad} kd->pred={kd_into_pred} "
               f"diff->student={diff_into_student}")


# --------------------------------------------------------------- criterion 6

@pytest.fixture(scope="session")
def ablation_ladder(tmp_path_factory):
    root = tmp_path_factory.mktemp("ladder")
    plan = yaml.safe_load(LADDER_PLAN.read_text())
    plan["base"].setdefault("data", {})["root"] = str(root / "data")
    start = time.time()
    out = ablate(plan, root / "report", runs_root=root / "runs")
    elapsed = time.time() - start
    summary = json.loads((out / "summary.json").read_text())
    return {"summary": summary, "elapsed": elapsed, "runs_root": root / "runs",
            "data_root": root / "data", "report": out}


def test_criterion_6_ablation_ordering(ablation_ladder):
    summary = ablation_ladder["summary"]
    med = {name: entry["median_miou"] for name, entry in summary["variants"].items()}
    teacher, baseline = med["teacher-normal"], med["baseline-dark"]
    dgkd, full = med["+dgkd"], med["+dgkd+dgf2"]
    elapsed = ablation_ladder["elapsed"]
    ok = (teacher >= baseline + 0.05
          and dgkd >= baseline + 0.03
          and full >= dgkd + 0.01
          and elapsed <= 45 * 60)
    _criterion(6, "ablation ordering", ok,
               f"teacher={teacher:.3f} baseline={baseline:.3f} +dgkd={dgkd:.3f} "
               f"+dgkd+dgf2={full:.3f} elapsed={elapsed/60:.1f}min")


def test_teacher_train_classification_accuracy(ablation_ladder):
    # teacher runs end with high train-split classification accuracy
    accs = []
    for seed in (0, 1, 2):
        metrics_path = ablation_ladder["runs_root"] / f"teacher-normal-s{seed}" / "metrics.jsonl"
        recs = [json.loads(l) for l in metrics_path.read_text().splitlines()]
        train_recs = [r for r in recs if r["split"] == "train"]
        accs.append(train_recs[-1]["cls_acc"])
    assert statistics.median(accs) >= 0.95, accs


def test_teacher_degrades_on_dark_inputs(ablation_ladder):
    # domain gap: the same teacher loses >= 5 mIoU points on dark inputs
    data_root = ablation_ladder["data_root"]
    dark_val, _ = load_corpus(data_root / "dark" / "val")
    tensors = corpus_to_tensors(dark_val)
    gaps = []
    for seed in (0, 1, 2):
        run_dir = ablation_ladder["runs_root"] / f"teacher-normal-s{seed}"
        net = load_segnet(run_dir / "checkpoint.pt")
        dark = evaluate_model(net, tensors["images"], tensors["masks"], 3)
        recs = [json.loads(l) for l in (run_dir / "metrics.jsonl").read_text().splitlines()]
        normal_miou = [r for r in recs if r["split"] == "val"][-1]["miou"]
        gaps.append(normal_miou - dark["miou"])
    assert statistics.median(gaps) >= 0.05, gaps


def test_mask_tap_kd_loss_halves(ablation_ladder):
    # median over seeds: distillation loss at the mask tap falls >= 50%
    # between step 50 and the end of training
    ratios = []
    for seed in (0, 1, 2):
        losses_path = ablation_ladder["runs_root"] / f"+dgkd-s{seed}" / "losses.jsonl"
        recs = [json.loads(l) for l in losses_path.read_text().splitlines()]
        mask_kd = [r["l_kd"][-1] for r in recs]

        def window(center, k=5):
            lo = max(0, center - k)
            return statistics.fmean(mask_kd[lo:center + k])

        ratios.append(window(len(mask_kd)) / window(50))
    assert statistics.median(ratios) <= 0.5, ratios


# --------------------------------------------------------------- criterion 7

def test_criterion_7_config_equivalences(tiny_corpus):
    def cfg(**extra):
        user = {
            "run": {"mode": "student", "seed": 3},
            "train": {"steps": 25, "eval_every": 25, "batch_size": 4,
                      "seg": {"warmup_steps": 5}},
            "diffusion": {"t_train": 30},
            "dgkd": {"t_enter": 10, "ddim_steps": 3},
        }
        def merge(a, b):
            for k, v in b.items():
                if isinstance(v, dict) and isinstance(a.get(k), dict):
                    merge(a[k], v)
                else:
                    a[k] = v
        merge(user, extra)
        return to_plain(resolve_config(user))

    args = (tiny_corpus["train"], tiny_corpus["train_dark"], tiny_corpus["val_dark"])
    baseline = train_student(cfg(), *args)
    for rep in baseline.loss_history:
        assert rep.l_overall == rep.l_cls + rep.l_seg

    empty_taps = train_student(cfg(dgkd={"enabled": True, "taps": []}), *args)
    dgf2_empty = train_student(cfg(dgf2={"enabled": True, "stages": []}), *args)
    same_taps = [a.to_dict() for a in baseline.loss_history] == \
                [b.to_dict() for b in empty_taps.loss_history]
    same_dgf2 = [a.to_dict() for a in baseline.loss_history] == \
                [b.to_dict() for b in dgf2_empty.loss_history]
    ok = same_taps and same_dgf2 and baseline.metric_records == empty_taps.metric_records \
        and baseline.metric_records == dgf2_empty.metric_records
    _criterion(7, "config equivalences", ok,
               f"empty_taps_match={same_taps} empty_stages_match={same_dgf2}")


# --------------------------------------------------------------- criterion 8

def test_criterion_8_run_determinism(tmp_path):
    from dgkd_lab.harness import run

    def cfg(run_id):
        return {
            "run": {"mode": "teacher", "seed": 5, "run_id": run_id,
                    "out_root": str(tmp_path / "runs")},
            "data": {"root": str(tmp_path / "data"), "train_count": 24, "val_count": 8},
            "train": {"steps": 40, "eval_every": 20, "seg": {"warmup_steps": 10}},
        }

    run(cfg("rep-a"))
    run(cfg("rep-b"))
    histories = []
    for rid in ("rep-a", "rep-b"):
        recs = [json.loads(l) for l in
                (tmp_path / "runs" / rid / "metrics.jsonl").read_text().splitlines()]
        losses = [json.loads(l) for l in
                  (tmp_path / "runs" / rid / "losses.jsonl").read_text().splitlines()]
        histories.append((recs, losses))
    (ma, la), (mb, lb) = histories
    scalar_match = all(
        abs(x["miou"] - y["miou"]) <= 1e-6 and abs(x["pixacc"] - y["pixacc"]) <= 1e-6
        for x, y in zip(ma, mb)
    ) and all(abs(x["l_overall"] - y["l_overall"]) <= 1e-6 for x, y in zip(la, lb))
    ok = scalar_match and ma == mb and la == lb
    _criterion(8, "run determinism", ok, f"records={len(ma)}+{len(la)}")


# --------------------------------------------------------------- criterion 9

def test_criterion_9_lowlight_pipeline(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0.0, 1.0, (16, 16, 3))
    identity = get_profile("identity")
    round_trip = float(np.abs(darken(img, identity, 1) - img).max())

    samples = generate_corpus(SceneSpec(seed=7), 40, "train")
    cfg = get_profile("dark-default")
    lo, hi = LUMINANCE_BANDS["dark-default"]
    ratios = [luminance_ratio(darken(s.image, cfg, s.sample_id), s.image) for s in samples]
    in_band = all(lo <= r <= hi for r in ratios)

    from dgkd_lab.toyscene import save_corpus
    save_corpus(samples[:8], tmp_path / "normal", SceneSpec(seed=7), "train")
    darken_corpus(tmp_path / "normal", cfg, tmp_path / "d1")
    darken_corpus(tmp_path / "normal", cfg, tmp_path / "d2")
    byte_det = corpus_hash(tmp_path / "d1") == corpus_hash(tmp_path / "d2")

    ok = round_trip <= 1.0 / (2**16 - 1) and in_band and byte_det
    _criterion(9, "low-light pipeline", ok,
               f"round_trip={round_trip:.2e} band=({min(ratios):.3f},{max(ratios):.3f}) "
               f"byte_deterministic={byte_det}")
