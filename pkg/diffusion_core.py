#!/usr/bin/env python3
"""
Diffusion Core

Noise schedules, closed-form forward noising, the predicted-x0 DDPM posterior
step and classifier-free guidance, plus the window sampling loop that ties
them to a denoiser.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

import config
from errors import InvalidInputError

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ('cosine', 'linear')


def betas_for_alpha_bar(num_steps, alpha_bar, max_beta=0.999):
    """Discretize a continuous alpha_bar(t), t in [0, 1], into per-step betas."""
    betas = []
    for i in range(num_steps):
        t1 = i / num_steps
        t2 = (i + 1) / num_steps
        betas.append(min(1 - alpha_bar(t2) / alpha_bar(t1), max_beta))
    return np.array(betas, dtype=np.float64)


def cosine_alpha_bar(t, s=0.008):
    return math.cos((t + s) / (1 + s) * math.pi / 2) ** 2


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise InvalidInputError("betas must be a non-empty vector")
        if not np.all((betas > 0) & (betas < 1)):
            raise InvalidInputError("betas must lie in (0, 1)")
        alphas = 1.0 - betas
        alphas_cumprod = np.cumprod(alphas)
        alphas_cumprod_prev = np.append(1.0, alphas_cumprod[:-1])
        set_ = object.__setattr__
        set_(self, 'betas', betas)
        set_(self, 'alphas', alphas)
        set_(self, 'alphas_cumprod', alphas_cumprod)
        set_(self, 'alphas_cumprod_prev', alphas_cumprod_prev)
        # q(z_{t-1} | z_t, z_0)
        set_(self, 'posterior_variance', betas * (1.0 - alphas_cumprod_prev) / (1.0 - alphas_cumprod))
        set_(self, 'posterior_mean_coef1', betas * np.sqrt(alphas_cumprod_prev) / (1.0 - alphas_cumprod))
        set_(self, 'posterior_mean_coef2', (1.0 - alphas_cumprod_prev) * np.sqrt(alphas) / (1.0 - alphas_cumprod))

    @property
    def T(self) -> int:
        return len(self.betas)


@dataclass
class GuidanceConfig:
    w: float = config.GUIDANCE_WEIGHT
    mask_rate: float = config.TEXT_MASK_RATE

    def __post_init__(self):
        if self.w < 0:
            raise InvalidInputError(f"guidance weight must be >= 0, got {self.w}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise InvalidInputError(f"mask rate must be in [0, 1], got {self.mask_rate}")


def build_schedule(T: int = config.DIFFUSION_STEPS, kind: str = config.SCHEDULE_KIND) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise InvalidInputError(f"diffusion step count must be >= 1, got {T}")
    T = int(T)
    if kind == 'cosine':
        betas = betas_for_alpha_bar(T, cosine_alpha_bar)
    elif kind == 'linear':
        scale = 1000 / T
        betas = np.clip(np.linspace(scale * 0.0001, scale * 0.02, T, dtype=np.float64), 1e-8, 0.999)
    else:
        raise InvalidInputError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")
    return NoiseSchedule(kind, betas)


def _extract(values: np.ndarray, t, like):
    """Per-step coefficient shaped to broadcast against `like` (int step or per-sample step tensor)."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        coef = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t.long()]
        return coef.reshape(-1, *([1] * (like.ndim - 1)))
    return float(values[int(t)])


def _check_step(t, sched: NoiseSchedule, low: int = 0):
    steps = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.any(steps < low) or np.any(steps >= sched.T):
        raise InvalidInputError(f"diffusion step {t} outside [{low}, {sched.T})")


def forward_diffuse(z0, t, noise, sched: NoiseSchedule):
    """z_t = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) noise."""
    _check_step(t, sched)
    if tuple(z0.shape) != tuple(noise.shape):
        raise InvalidInputError(f"noise shape {tuple(noise.shape)} does not match {tuple(z0.shape)}")
    signal = _extract(np.sqrt(sched.alphas_cumprod), t, z0)
    sigma = _extract(np.sqrt(1.0 - sched.alphas_cumprod), t, z0)
    return signal * z0 + sigma * noise


def posterior_step(z_t, z0_hat, t: int, sched: NoiseSchedule, noise=None):
    """One reverse step from a predicted clean sample; at t = 0 the prediction is returned as is."""
    _check_step(t, sched)
    if int(t) == 0:
        return z0_hat
    mean = (_extract(sched.posterior_mean_coef1, t, z_t) * z0_hat
            + _extract(sched.posterior_mean_coef2, t, z_t) * z_t)
    if noise is None:
        return mean
    return mean + math.sqrt(sched.posterior_variance[int(t)]) * noise


def cfg_combine(pred_uncond, pred_cond, w: float):
    if tuple(pred_uncond.shape) != tuple(pred_cond.shape):
        raise InvalidInputError("guidance inputs must share a shape")
    return (1.0 - w) * pred_uncond + w * pred_cond


def _history_tensor(history, dtype):
    frames = getattr(history, 'frames', history)
    tensor = torch.as_tensor(np.asarray(frames) if not isinstance(frames, torch.Tensor) else frames, dtype=dtype)
    return tensor


@torch.no_grad()
def sample_window(denoiser, history, text: Union[None, str, Sequence[Optional[str]]] = None,
                  sched: Optional[NoiseSchedule] = None, guidance: Optional[GuidanceConfig] = None,
                  rng_seed: int = 0, generator: Optional[torch.Generator] = None):
    """
    Full reverse-diffusion sampling of one prediction window from pure noise.

    `history` is (h, 443) or a batch (B, h, 443) in normalized feature space; the result
    has the matching (k, 443) or (B, k, 443) shape. With text present each step makes a
    conditioned and an unconditioned denoiser call and blends them with `guidance.w`.
    """
    sched = sched or build_schedule()
    guidance = guidance or GuidanceConfig()
    dtype = next(denoiser.parameters()).dtype
    hist = _history_tensor(history, dtype)
    single = hist.ndim == 2
    if single:
        hist = hist[None]
    batch = hist.shape[0]
    if hist.shape[1] != denoiser.history_frames:
        raise InvalidInputError(f"history must have {denoiser.history_frames} frames, got {hist.shape[1]}")

    texts = [text] * batch if text is None or isinstance(text, str) else list(text)
    if len(texts) != batch:
        raise InvalidInputError("one text label per batch item is required")
    guided = any(label for label in texts)
    cond = denoiser.text_condition(texts, dtype=dtype)
    null = denoiser.text_condition([None] * batch, dtype=dtype)

    if generator is None:
        generator = torch.Generator().manual_seed(int(rng_seed))
    z = torch.randn((batch, denoiser.window_frames, config.FRAME_DIM), generator=generator, dtype=dtype)
    for t in reversed(range(sched.T)):
        steps = torch.full((batch,), t, dtype=torch.long)
        if guided:
            pred = cfg_combine(denoiser(z, hist, steps, null), denoiser(z, hist, steps, cond), guidance.w)
        else:
            pred = denoiser(z, hist, steps, null)
        noise = torch.randn(z.shape, generator=generator, dtype=dtype) if t > 0 else None
        z = posterior_step(z, pred, t, sched, noise)
    return z[0] if single else z
