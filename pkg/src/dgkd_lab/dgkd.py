"""Diffusion-guided knowledge distillation.

Per tap: train the tap's denoiser on the teacher feature (one noising pass),
run the deterministic reverse chain on the student feature with the denoiser
frozen for the step, and distill the denoised student feature against the
teacher with the tap's distance. Gradients are partitioned: the denoiser
learns only from its noise-prediction loss, the student only from the
distillation loss, and the teacher never receives any."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .diffusion import DdimPlan, NoiseSchedule, ddim_denoise, diffusion_loss

TAP_LOCATIONS = ("stage1", "stage2", "mask_logits")
DISTANCES = ("mse", "kl_div")
# default pairing: feature taps use mse, the mask tap uses per-pixel KL
DEFAULT_DISTANCE = {"stage1": "mse", "stage2": "mse", "mask_logits": "kl_div"}


@dataclass
class DistillTap:
    name: str
    location: str
    teacher_feature: torch.Tensor
    student_feature: torch.Tensor
    predictor: torch.nn.Module
    distance: str = ""

    def __post_init__(self):
        if self.location not in TAP_LOCATIONS:
            raise ValueError(f"unknown tap location {self.location!r}")
        if not self.distance:
            self.distance = DEFAULT_DISTANCE[self.location]
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.teacher_feature.shape != self.student_feature.shape:
            raise ValueError(
                f"tap {self.name!r}: teacher {tuple(self.teacher_feature.shape)} and "
                f"student {tuple(self.student_feature.shape)} shapes differ"
            )


@dataclass
class DgkdOutput:
    denoised_student: dict = field(default_factory=dict)
    loss_diff: dict = field(default_factory=dict)
    loss_kd: dict = field(default_factory=dict)

    def total(self, weights=None):
        names = list(self.loss_diff)
        if weights is None:
            weights = [1.0] * len(names)
        if len(weights) != len(names):
            raise ValueError("weights length must match number of taps")
        total = None
        for w, name in zip(weights, names):
            term = w * (self.loss_diff[name] + self.loss_kd[name])
            total = term if total is None else total + term
        return total


def hierarchical_weights(m: int, override=None):
    """Per-tap weights for the distillation terms; the objective sums them
    unweighted, so the default is all ones. `override` passes through."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if override is not None:
        if len(override) != m:
            raise ValueError(f"override length {len(override)} != m {m}")
        return [float(w) for w in override]
    return [1.0] * m


def kd_distance(denoised, teacher, kind: str):
    if kind == "mse":
        return F.mse_loss(denoised, teacher)
    if kind == "kl_div":
        # per-pixel KL from the teacher class distribution to the student's
        log_q = F.log_softmax(denoised, dim=1)
        p = F.softmax(teacher, dim=1)
        log_p = F.log_softmax(teacher, dim=1)
        return (p * (log_p - log_q)).sum(dim=1).mean()
    raise ValueError(f"unknown distance {kind!r}")


@contextmanager
def frozen_params(module):
    states = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in states:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, was in states:
            p.requires_grad_(was)


def _check_finite(name, value, **context):
    if not torch.isfinite(value).all():
        details = ", ".join(
            f"max|{k}|={float(v.detach().abs().max()):.3e}" for k, v in context.items()
        )
        raise RuntimeError(f"non-finite loss at tap {name!r} ({details})")


def dgkd_step(taps, sched: NoiseSchedule, plan: DdimPlan, generators) -> DgkdOutput:
    """Run one distillation step over all taps.

    `generators` maps tap name to the torch.Generator driving that tap's
    noising draws (keeps tap streams independent of everything else).
    """
    out = DgkdOutput()
    for tap in taps:
        teacher = tap.teacher_feature.detach()
        gen = generators[tap.name]

        l_diff = diffusion_loss(tap.predictor, teacher, sched, gen)
        _check_finite(tap.name, l_diff, teacher=teacher)

        with frozen_params(tap.predictor):
            denoised = ddim_denoise(tap.student_feature, tap.predictor, sched, plan)

        l_kd = kd_distance(denoised, teacher, tap.distance)
        _check_finite(tap.name, l_kd, denoised=denoised, teacher=teacher,
                      student=tap.student_feature)

        out.denoised_student[tap.name] = denoised
        out.loss_diff[tap.name] = l_diff
        out.loss_kd[tap.name] = l_kd
    return out
