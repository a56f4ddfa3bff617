#!/usr/bin/env python3
"""
Denoiser

Transformer denoiser G(z_t, history, t, c) predicting the clean prediction window,
its condition embeddings, the Adam optimizer wrapper and checkpoint files.

Token layout per sample: [time, text, h history frames, k noised frames]. The time
embedding is also added to every noised frame token. Only the k prediction slots
are read by the output head.
"""

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

import config
from errors import InvalidInputError, StateError, TrainingError, UnsupportedVersionError
from motion_core import NormalizationStats

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'reaction-ckpt'
CHECKPOINT_VERSION = 1


@dataclass
class DenoiserConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    time_embed_dim: int = 64
    text_embed_dim: int = 64
    history_frames: int = config.HISTORY_FRAMES
    window_frames: int = config.WINDOW_FRAMES

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise InvalidInputError(f"denoiser {name} must be >= 1, got {value}")
        if self.hidden % self.heads:
            raise InvalidInputError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if self.time_embed_dim < 4:
            raise InvalidInputError("time_embed_dim must be >= 4")

    @classmethod
    def from_profile(cls, name: str = 'tiny', **overrides) -> 'DenoiserConfig':
        if name not in config.DENOISER_PROFILES:
            raise InvalidInputError(f"unknown denoiser profile {name!r}")
        return cls(**{**config.DENOISER_PROFILES[name], **overrides})


@dataclass
class ConditionBundle:
    text_embed: np.ndarray
    null_flag: bool


def embed_text(label: Optional[str], dim: int = config.DENOISER_PROFILES['tiny']['text_embed_dim']) -> ConditionBundle:
    """Deterministic bag-of-tokens embedding: every token hashes to a fixed unit vector."""
    tokens = (label or '').lower().split()
    if not tokens:
        return ConditionBundle(np.zeros(dim), True)
    total = np.zeros(dim)
    for token in tokens:
        seed = int.from_bytes(hashlib.sha256(token.encode('utf-8')).digest()[:8], 'little')
        vector = np.random.default_rng(seed).standard_normal(dim)
        total += vector / np.linalg.norm(vector)
    norm = np.linalg.norm(total)
    if norm < 1e-12:
        return ConditionBundle(np.zeros(dim), True)
    return ConditionBundle(total / norm, False)


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, :dim // 2]
    return table


class SinusoidalPosEmb(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim

    def forward(self, x):
        half_dim = self.dim // 2
        emb = math.log(10000) / (half_dim - 1)
        emb = torch.exp(torch.arange(half_dim, device=x.device, dtype=x.dtype) * -emb)
        emb = x[:, None] * emb[None, :]
        return torch.cat((emb.sin(), emb.cos()), dim=-1)


class ReactionDenoiser(nn.Module):
    FROZEN = ('positional',)

    def __init__(self, cfg: Optional[DenoiserConfig] = None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        hidden = self.cfg.hidden
        self.history_frames = self.cfg.history_frames
        self.window_frames = self.cfg.window_frames

        self.input_proj = nn.Linear(config.FRAME_DIM, hidden)
        # sinusoidal init; gradients accumulate but the optimizer never updates it
        self.positional = nn.Parameter(sinusoidal_table(self.history_frames + self.window_frames, hidden))
        self.time_mlp = nn.Sequential(
            SinusoidalPosEmb(self.cfg.time_embed_dim),
            nn.Linear(self.cfg.time_embed_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
        )
        self.text_proj = nn.Linear(self.cfg.text_embed_dim, hidden)
        layer = nn.TransformerEncoderLayer(hidden, self.cfg.heads, dim_feedforward=4 * hidden, dropout=0.0,
                                           activation='gelu', batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=self.cfg.layers, enable_nested_tensor=False)
        self.final_norm = nn.LayerNorm(hidden)
        self.output_head = nn.Linear(hidden, config.FRAME_DIM)

    def forward(self, z_t, history, t, text_embed):
        batch = z_t.shape[0]
        if tuple(z_t.shape[1:]) != (self.window_frames, config.FRAME_DIM):
            raise InvalidInputError(f"z_t must be (B, {self.window_frames}, {config.FRAME_DIM}), got {tuple(z_t.shape)}")
        if tuple(history.shape) != (batch, self.history_frames, config.FRAME_DIM):
            raise InvalidInputError(f"history must be (B, {self.history_frames}, {config.FRAME_DIM}), got {tuple(history.shape)}")
        if tuple(text_embed.shape) != (batch, self.cfg.text_embed_dim):
            raise InvalidInputError(f"text embedding must be (B, {self.cfg.text_embed_dim})")
        t = torch.as_tensor(t, device=z_t.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)

        tokens = self.input_proj(torch.cat([history, z_t], dim=1)) + self.positional[None]
        t_emb = self.time_mlp(t.to(z_t.dtype))
        prediction_tokens = tokens[:, self.history_frames:] + t_emb[:, None]
        sequence = torch.cat([t_emb[:, None], self.text_proj(text_embed)[:, None],
                              tokens[:, :self.history_frames], prediction_tokens], dim=1)
        out = self.encoder(sequence)
        return self.output_head(self.final_norm(out[:, 2 + self.history_frames:]))

    def denoise(self, z_t, history, t, cond: ConditionBundle):
        """Single-sample convenience wrapper: (k, 443), (h, 443), step, condition -> (k, 443)."""
        dtype = self.dtype
        text = torch.as_tensor(cond.text_embed, dtype=dtype)[None]
        return self(torch.as_tensor(z_t, dtype=dtype)[None], torch.as_tensor(history, dtype=dtype)[None],
                    torch.tensor([int(t)]), text)[0]

    @property
    def dtype(self):
        return self.output_head.weight.dtype

    def text_condition(self, texts: Sequence[Optional[str]], dtype=None) -> torch.Tensor:
        vectors = np.stack([embed_text(label, self.cfg.text_embed_dim).text_embed for label in texts])
        return torch.as_tensor(vectors, dtype=dtype or self.dtype)

    def trainable_named_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return [(name, p) for name, p in self.named_parameters() if name not in self.FROZEN]

    def backward(self, output, upstream=None) -> Dict[str, torch.Tensor]:
        """Reverse-mode gradients of `output` (weighted by `upstream`) for every parameter."""
        if not isinstance(output, torch.Tensor) or output.grad_fn is None:
            raise StateError("backward called without a recorded forward pass")
        self.zero_grad(set_to_none=False)
        output.backward(upstream)
        return {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for name, p in self.named_parameters()}


class AdamOptimizer:
    """torch Adam over the trainable parameters with finite checks and norm clipping."""

    def __init__(self, named_parameters: Iterable[Tuple[str, nn.Parameter]], lr: float = config.LEARNING_RATE,
                 betas=config.ADAM_BETAS, eps: float = config.ADAM_EPS, grad_clip: float = config.GRAD_CLIP):
        self.named_parameters = list(named_parameters)
        self.grad_clip = grad_clip
        self.step_count = 0
        self.optimizer = torch.optim.Adam([p for _, p in self.named_parameters], lr=lr, betas=tuple(betas), eps=eps)

    def step(self) -> float:
        for name, p in self.named_parameters:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingError("non-finite gradient", {'parameter': name, 'step': self.step_count})
        params = [p for _, p in self.named_parameters if p.grad is not None]
        grad_norm = torch.nn.utils.clip_grad_norm_(params, self.grad_clip) if params else torch.tensor(0.0)
        self.optimizer.step()
        self.step_count += 1
        return float(grad_norm)

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=False)

    def state_dict(self):
        return {'optimizer': self.optimizer.state_dict(), 'step_count': self.step_count}

    def load_state_dict(self, state):
        self.optimizer.load_state_dict(state['optimizer'])
        self.step_count = int(state['step_count'])


@dataclass
class Checkpoint:
    model: ReactionDenoiser
    stats: NormalizationStats
    schedule: Dict = field(default_factory=lambda: {'T': config.DIFFUSION_STEPS, 'kind': config.SCHEDULE_KIND})
    optimizer_state: Optional[Dict] = None
    iteration: int = 0


def save_checkpoint(path, model: ReactionDenoiser, stats: NormalizationStats, schedule: Optional[Dict] = None,
                    optimizer: Optional[AdamOptimizer] = None, iteration: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'config': asdict(model.cfg),
        'state_dict': model.state_dict(),
        'stats': {'mean': torch.as_tensor(stats.mean), 'std': torch.as_tensor(stats.std)},
        'schedule': dict(schedule or {'T': config.DIFFUSION_STEPS, 'kind': config.SCHEDULE_KIND}),
        'optimizer': optimizer.state_dict() if optimizer else None,
        'iteration': int(iteration),
    }
    torch.save(payload, path)
    logger.info(f"💾 Saved checkpoint to {path}")
    return path


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(Path(path), map_location='cpu', weights_only=True)
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise UnsupportedVersionError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get('version') != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path} has checkpoint version {payload.get('version')}, expected {CHECKPOINT_VERSION}")
    dtype = payload['state_dict']['output_head.weight'].dtype
    model = ReactionDenoiser(DenoiserConfig(**payload['config'])).to(dtype)
    model.load_state_dict(payload['state_dict'])
    stats = NormalizationStats(payload['stats']['mean'].numpy(), payload['stats']['std'].numpy())
    logger.info(f"✅ Loaded checkpoint {path} (iteration {payload['iteration']})")
    return Checkpoint(model, stats, payload['schedule'], payload['optimizer'], payload['iteration'])
