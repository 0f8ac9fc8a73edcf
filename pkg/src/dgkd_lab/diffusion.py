"""Diffusion core over feature maps: noise schedules, closed-form forward
sampling, noise-prediction training loss, and deterministic DDIM reversal.

The denoiser is parameterized to predict the injected noise; the reverse
update inverts the closed-form forward sample with that prediction and
re-noises to the previous timestep (variance zero, so the reverse pass is
deterministic). Index 0 of the schedule arrays is the clean state
(alpha_bar[0] = 1), timesteps run 1..T.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ALPHA_BAR_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray       # (T+1,) float64, beta[0] = 0 unused
    alpha: np.ndarray      # (T+1,) alpha[t] = 1 - beta[t]
    alpha_bar: np.ndarray  # (T+1,) running product, alpha_bar[0] = 1

    @property
    def t_train(self) -> int:
        return len(self.beta) - 1

    def __post_init__(self):
        ab = self.alpha_bar
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be 1 (clean state)")
        if not (np.diff(ab) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        if not ((ab[1:] > 0) & (ab[1:] < 1)).all():
            raise ValueError("alpha_bar[t] must lie in (0, 1) for t >= 1")


def schedule_from_beta(beta_values) -> NoiseSchedule:
    """Build a schedule from explicit per-step betas (t = 1..T)."""
    b = np.asarray(beta_values, dtype=np.float64)
    if b.ndim != 1 or len(b) < 1:
        raise ValueError("beta_values must be a non-empty 1-d sequence")
    if not ((b > 0) & (b < 1)).all():
        raise ValueError("betas must lie in (0, 1)")
    beta = np.concatenate([[0.0], b])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar[0] = 1.0
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def make_schedule(t_train: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule over t = 1..t_train with exact running products."""
    if t_train < 1:
        raise ValueError("t_train must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("require 0 < beta_start <= beta_end < 1")
    return schedule_from_beta(np.linspace(beta_start, beta_end, t_train))


@dataclass(frozen=True)
class DdimPlan:
    tau: tuple            # strictly decreasing timesteps, tau[0] largest
    sigma: tuple = ()     # per-step variances; all zero in this artifact

    def __post_init__(self):
        object.__setattr__(self, "tau", tuple(int(t) for t in self.tau))
        if len(self.tau) < 1:
            raise ValueError("plan needs at least one timestep")
        if any(t < 1 for t in self.tau):
            raise ValueError("plan timesteps must be >= 1")
        if list(self.tau) != sorted(set(self.tau), reverse=True):
            raise ValueError("tau must be strictly decreasing")
        sigma = self.sigma if self.sigma else tuple(0.0 for _ in self.tau)
        object.__setattr__(self, "sigma", sigma)
        if len(self.sigma) != len(self.tau):
            raise ValueError("sigma length must match tau length")
        if any(s != 0.0 for s in self.sigma):
            raise ValueError("only the deterministic sigma = 0 reverse pass is supported")

    @property
    def steps(self) -> int:
        return len(self.tau)


def make_plan(t_enter: int, k: int) -> DdimPlan:
    """K evenly strided reverse steps entering the chain at t_enter."""
    if k < 1 or t_enter < 1:
        raise ValueError("k and t_enter must be >= 1")
    if k > t_enter:
        raise ValueError("cannot stride more steps than timesteps")
    tau = tuple(int(round(t_enter * (k - i) / k)) for i in range(k))
    return DdimPlan(tau=tau)


def forward_sample(z0: torch.Tensor, t: int, sched: NoiseSchedule, noise: torch.Tensor):
    """Closed-form sample of the forward process at timestep t.

    Returns (z_t, noise) with z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) noise.
    """
    if not (1 <= t <= sched.t_train):
        raise ValueError(f"t={t} outside schedule range 1..{sched.t_train}")
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != z0 shape {tuple(z0.shape)}")
    ab = float(sched.alpha_bar[t])
    zt = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise
    return zt, noise


def forward_chain(z0: torch.Tensor, t: int, sched: NoiseSchedule, seed: int) -> torch.Tensor:
    """Apply the single-step forward transition t times (the iterative
    counterpart of forward_sample; equal in distribution)."""
    if not (0 <= t <= sched.t_train):
        raise ValueError(f"t={t} outside schedule range 0..{sched.t_train}")
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    z = z0
    for s in range(1, t + 1):
        beta = float(sched.beta[s])
        eps = torch.randn(z.shape, generator=gen, dtype=z.dtype)
        z = math.sqrt(1.0 - beta) * z + math.sqrt(beta) * eps
    return z


def sinusoidal_embedding(t, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=dtype) * (-math.log(10000.0) / max(half - 1, 1)))
    args = torch.as_tensor(float(t), dtype=dtype) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)])


class NoisePredictor(nn.Module):
    """Channel-preserving two-layer conv denoiser with a projected sinusoidal
    timestep embedding added channel-wise before the nonlinearity."""

    def __init__(self, channels, time_dim=16):
        super().__init__()
        self.channels = channels
        self.time_dim = time_dim
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)
        # zero output layer: the reverse pass starts as a pure rescaling
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, z, t):
        emb = sinusoidal_embedding(t, self.time_dim, dtype=z.dtype)
        h = self.conv1(z) + self.time_proj(emb).view(1, -1, 1, 1)
        h = F.silu(h)
        return self.conv2(h)


def diffusion_loss(predictor, z0: torch.Tensor, sched: NoiseSchedule,
                   generator: torch.Generator) -> torch.Tensor:
    """One noising pass: draw t and noise, return the mean squared error of
    the noise prediction. Non-negative by construction."""
    t = int(torch.randint(1, sched.t_train + 1, (1,), generator=generator))
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    zt, _ = forward_sample(z0, t, sched, eps)
    return F.mse_loss(predictor(zt, t), eps)


def ddim_denoise(z_init: torch.Tensor, predictor, sched: NoiseSchedule,
                 plan: DdimPlan) -> torch.Tensor:
    """Deterministic reverse pass over plan.tau, ending at the clean state."""
    if plan.tau[0] > sched.t_train:
        raise ValueError(f"plan enters at t={plan.tau[0]} beyond schedule T={sched.t_train}")
    z = z_init
    targets = list(plan.tau[1:]) + [0]
    for t, t_prev in zip(plan.tau, targets):
        ab_t = float(sched.alpha_bar[t])
        if ab_t < ALPHA_BAR_FLOOR:
            raise FloatingPointError(
                f"alpha_bar[{t}]={ab_t:.3e} below {ALPHA_BAR_FLOOR}; inversion ill-conditioned"
            )
        eps_hat = predictor(z, t)
        z0_hat = (z - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        ab_p = float(sched.alpha_bar[t_prev])
        z = math.sqrt(ab_p) * z0_hat + math.sqrt(1.0 - ab_p) * eps_hat
    return z
