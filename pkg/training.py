#!/usr/bin/env python3
"""
Training

The four training losses, the scheduled-training probability and the three-phase
loop that gradually replaces ground-truth history with the model's own rollouts.
"""

import logging
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

import config
from data_io import InteractionRecord, TrainingCrop, compute_feature_stats, crop_windows
from denoiser import AdamOptimizer, ReactionDenoiser, save_checkpoint
from diffusion_core import GuidanceConfig, NoiseSchedule, build_schedule, forward_diffuse, sample_window
from errors import InvalidInputError, TrainingError
from motion_core import (
    FIELD_SLICE, P_DOT_SLICE, P_SLICE, POSE_MASK, R_DOT_SLICE, SMPL22, X_CONTACT_SLICE, Y_CONTACT_SLICE,
    Y_JOINT_SLICE, Y_JOINT_VEL_SLICE, CanonicalTransform, MotionClip, NormalizationStats, Skeleton,
    canonical_history, denormalize_features, normalize_features, recover,
)

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ['iter', 'total', 'simple', 'foot', 'inter', 'prefix', 'p']
PROVENANCE = ('initial', 'dataset', 'rollout')


@dataclass
class LossWeights:
    foot: float = config.LOSS_WEIGHTS['foot']
    inter: float = config.LOSS_WEIGHTS['inter']
    prefix: float = config.LOSS_WEIGHTS['prefix']

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise InvalidInputError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class TrainPlan:
    max_iters: int = 3000
    phase_boundaries: Optional[Tuple[int, int]] = None
    consecutive_windows: int = config.CONSECUTIVE_WINDOWS
    batch_size: int = 8
    seed: int = 0
    learning_rate: float = config.LEARNING_RATE
    checkpoint_every: int = 0
    log_every: int = 100
    deterministic: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be >= 1")
        if self.phase_boundaries is None:
            self.phase_boundaries = (self.max_iters // 3, 2 * self.max_iters // 3)
        first, second = self.phase_boundaries
        if not 0 <= first <= second:
            raise InvalidInputError(f"phase boundaries must be ordered, got {self.phase_boundaries}")
        self.phase_boundaries = (int(first), int(second))
        if self.consecutive_windows < 1:
            raise InvalidInputError("consecutive_windows must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _batched(frames):
    return frames if frames.ndim == 3 else frames[None]


def _rotate_y(vectors, yaw):
    c, s = torch.cos(yaw), torch.sin(yaw)
    x, y, z = vectors[..., 0], vectors[..., 1], vectors[..., 2]
    return torch.stack([c * x + s * z, y, -s * x + c * z], dim=-1)


def loss_simple(z0, z0_hat):
    if tuple(z0.shape) != tuple(z0_hat.shape):
        raise InvalidInputError("loss_simple inputs must share a shape")
    return torch.mean((z0_hat - z0) ** 2)


def loss_foot(z0_hat, transform: Optional[CanonicalTransform] = None, fps: float = config.FPS,
              skeleton: Skeleton = SMPL22):
    """Squared global velocity of contact-labelled feet of both agents; summed over feet, averaged over frames."""
    frames = _batched(z0_hat)
    batch, length = frames.shape[:2]
    yaw = torch.cumsum(frames[..., R_DOT_SLICE][..., 0], dim=-1) / fps
    if transform is not None:
        yaw = yaw + transform.yaw
    ids = list(skeleton.foot_joint_ids)
    velocity = torch.cat([
        frames[..., P_DOT_SLICE].reshape(batch, length, 22, 3)[:, :, ids],
        frames[..., Y_JOINT_VEL_SLICE].reshape(batch, length, 22, 3)[:, :, ids],
    ], dim=2)
    labels = torch.cat([frames[..., X_CONTACT_SLICE], frames[..., Y_CONTACT_SLICE]], dim=-1)
    masked = _rotate_y(velocity, yaw[..., None]) * labels[..., None]
    return (masked ** 2).sum(dim=(-1, -2)).mean()


def loss_inter(z0_hat, skeleton: Skeleton = SMPL22):
    """Squared distance of field-flagged contact joint pairs in the reactor frame."""
    frames = _batched(z0_hat)
    batch, length = frames.shape[:2]
    root = torch.zeros(batch, length, 1, 3, dtype=frames.dtype, device=frames.device)
    root[..., 0, 1] = frames[..., 0]
    reactor = torch.cat([root, frames[..., P_SLICE].reshape(batch, length, 21, 3)], dim=2)
    actor = frames[..., Y_JOINT_SLICE].reshape(batch, length, 22, 3)
    ids = list(skeleton.contact_field_ids)
    diff = reactor[:, :, ids, None, :] - actor[:, :, None, ids, :]
    field_values = frames[..., FIELD_SLICE].reshape(batch, length, 6, 6)
    return ((diff * field_values[..., None]) ** 2).sum(dim=(-1, -2, -3)).mean()


def loss_prefix(history, z0_hat):
    """Mean squared jump between the last history frame and the first prediction over pose dims."""
    history, frames = _batched(history), _batched(z0_hat)
    if history.shape[1] < 1:
        raise InvalidInputError("prefix loss needs at least one history frame")
    mask = torch.as_tensor(POSE_MASK, device=frames.device)
    jump = frames[:, 0, mask] - history[:, -1, mask]
    return torch.mean(jump ** 2)


def combine_losses(terms: Dict[str, torch.Tensor], weights: LossWeights):
    return terms['simple'] + weights.foot * terms['foot'] + weights.inter * terms['inter'] \
        + weights.prefix * terms['prefix']


def total_loss(z0, z0_hat, history, weights: Optional[LossWeights] = None,
               stats: Optional[NormalizationStats] = None, transform: Optional[CanonicalTransform] = None):
    """
    Weighted training objective and its per-term breakdown.

    With `stats` the inputs are normalized features: the simple term stays in normalized
    space and the auxiliary terms are evaluated on denormalized (physical) features.
    """
    weights = weights or LossWeights()
    physical_pred = denormalize_features(z0_hat, stats) if stats is not None else z0_hat
    physical_hist = denormalize_features(history, stats) if stats is not None else history
    terms = {
        'simple': loss_simple(z0, z0_hat),
        'foot': loss_foot(physical_pred, transform),
        'inter': loss_inter(physical_pred),
        'prefix': loss_prefix(physical_hist, physical_pred),
    }
    total = combine_losses(terms, weights)
    return total, {name: float(value.detach()) for name, value in terms.items()}


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def schedule_probability(iteration: int, plan: TrainPlan) -> float:
    """Probability of keeping ground-truth history: 1, then linear to 0, then 0."""
    if iteration < 0:
        raise InvalidInputError("iteration must be >= 0")
    first, second = plan.phase_boundaries
    if iteration < first:
        return 1.0
    if iteration >= second:
        return 0.0
    return 1.0 - (iteration - first) / (second - first)


def mask_text(labels: Sequence[Optional[str]], rate: float, rng: np.random.Generator) -> List[Optional[str]]:
    """Per-sample condition dropout."""
    drop = rng.random(len(labels)) < rate
    return [None if dropped else label for label, dropped in zip(labels, drop)]


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: pd.DataFrame
    stats: NormalizationStats
    rollout_calls: int
    provenance: List[Tuple[int, int, List[str]]] = field(default_factory=list)  # (iter, window, tags)
    checkpoint: Optional[Path] = None


class CropPrefetcher:
    """Background producer of crop batches with canonical features computed, bounded by a queue."""

    _DONE = object()

    def __init__(self, batches: Iterator[List[TrainingCrop]], depth: int = config.QUEUE_DEPTH):
        self.queue = queue.Queue(maxsize=depth)
        self.stop_event = threading.Event()
        self.error = None
        self.thread = threading.Thread(target=self._produce, args=(batches,), daemon=True)
        self.thread.start()

    def _produce(self, batches):
        try:
            for batch in batches:
                while not self.stop_event.is_set():
                    try:
                        self.queue.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self.stop_event.is_set():
                    return
        except Exception as e:
            self.error = e
        self.queue.put(self._DONE)

    def __iter__(self):
        return self

    def __next__(self):
        item = self.queue.get()
        if item is self._DONE:
            if self.error:
                raise self.error
            raise StopIteration
        return item

    def close(self):
        self.stop_event.set()


def _crop_batches(records, plan: TrainPlan, history: int, window: int) -> Iterator[List[TrainingCrop]]:
    crops = crop_windows(records, plan.consecutive_windows, history, window, seed=plan.seed)
    while True:
        batch = [next(crops) for _ in range(plan.batch_size)]
        for crop in batch:
            crop.features  # encode now, possibly off the training thread
        yield batch


class ScheduledTrainer:
    """Owns the denoiser parameters for one training run."""

    def __init__(self, model: ReactionDenoiser, sched: Optional[NoiseSchedule] = None,
                 plan: Optional[TrainPlan] = None, weights: Optional[LossWeights] = None,
                 guidance: Optional[GuidanceConfig] = None, stats: Optional[NormalizationStats] = None):
        self.model = model
        self.sched = sched or build_schedule()
        self.plan = plan or TrainPlan()
        self.weights = weights or LossWeights()
        self.guidance = guidance or GuidanceConfig()
        self.stats = stats
        self.optimizer = AdamOptimizer(model.trainable_named_parameters(), lr=self.plan.learning_rate)
        self.rng = np.random.default_rng(self.plan.seed)
        self.generator = torch.Generator().manual_seed(self.plan.seed)
        self.rollout_calls = 0
        self.provenance = []
        self.rows = []
        self.output_dir = None

    @property
    def history_frames(self):
        return self.model.history_frames

    @property
    def window_frames(self):
        return self.model.window_frames

    def _normalized(self, frames: np.ndarray, clip: bool = False) -> torch.Tensor:
        limit = config.GENERATED_ZSCORE_LIMIT if clip else None
        return torch.as_tensor(normalize_features(frames, self.stats, limit), dtype=self.model.dtype)

    def _rollout(self, crops, indices, history: torch.Tensor, reactors: List[MotionClip], window_index: int):
        """Replace the next history of the selected samples with the model's own full-sampling rollout."""
        h, k = self.history_frames, self.window_frames
        selected = torch.as_tensor(indices, dtype=torch.long)
        predicted = sample_window(self.model, history[selected], None, self.sched, self.guidance,
                                  generator=self.generator)
        self.rollout_calls += 1
        past = denormalize_features(history[selected].detach().cpu().numpy().astype(np.float64), self.stats)
        future = denormalize_features(predicted.cpu().numpy().astype(np.float64), self.stats)
        end = h + (window_index + 1) * k

        new_history, new_reactors = [], []
        for j, b in enumerate(indices):
            crop = crops[b]
            transform = CanonicalTransform.at_frame(reactors[b], 0)
            reactor = recover(np.concatenate([past[j], future[j]]), transform, crop.record.fps)
            reactor = reactor.slice(len(reactor) - h - 1, len(reactor))
            actor = crop.actor.slice(end - h - 1, end)
            new_history.append(canonical_history(reactor, actor, h))
            new_reactors.append(reactor.slice(1, h + 1))
        return self._normalized(np.stack(new_history), clip=True), new_reactors

    def _step(self, iteration, window_index, crops, features, history, p):
        h, k = self.history_frames, self.window_frames
        start = h + window_index * k
        z0 = features[:, start:start + k]
        batch = z0.shape[0]
        t = torch.randint(0, self.sched.T, (batch,), generator=self.generator)
        noise = torch.randn(z0.shape, generator=self.generator, dtype=z0.dtype)
        z_t = forward_diffuse(z0, t, noise, self.sched)
        texts = mask_text([crop.label for crop in crops], self.guidance.mask_rate, self.rng)
        prediction = self.model(z_t, history, t, self.model.text_condition(texts))
        total, terms = total_loss(z0, prediction, history, self.weights, self.stats)
        if not torch.isfinite(total):
            raise TrainingError("non-finite loss", {'iter': iteration, 'window': window_index, **terms})
        self.model.backward(total)
        self.optimizer.step()
        row = {'iter': iteration, 'total': float(total.detach()), **terms, 'p': p}
        self.rows.append(row)
        return row

    def _run_batch(self, crops: List[TrainingCrop], iteration: int, progress) -> int:
        h, k = self.history_frames, self.window_frames
        features = self._normalized(np.stack([crop.features for crop in crops]))
        history = features[:, :h]
        reactors = [crop.reactor.slice(0, h) for crop in crops]
        tags = ['initial'] * len(crops)
        p = schedule_probability(iteration, self.plan)

        for i in range(self.plan.consecutive_windows):
            if iteration >= self.plan.max_iters:
                break
            self.provenance.append((iteration, i, list(tags)))
            row = self._step(iteration, i, crops, features, history, p)
            iteration += 1
            progress.update(1)
            if self.plan.log_every and iteration % self.plan.log_every == 0:
                logger.info(f"📊 iter {iteration}: total={row['total']:.5f} simple={row['simple']:.5f} p={p:.3f}")
            if self.plan.checkpoint_every and iteration % self.plan.checkpoint_every == 0 and self.output_dir:
                save_checkpoint(self.output_dir / 'checkpoints' / f"ckpt_{iteration:07d}.pt", self.model,
                                self.stats, {'T': self.sched.T, 'kind': self.sched.kind}, self.optimizer, iteration)
            if i == self.plan.consecutive_windows - 1 or iteration >= self.plan.max_iters:
                break

            # history for the next window, decided with the probability of the iteration that uses it
            p = schedule_probability(iteration, self.plan)
            end = h + (i + 1) * k
            next_history = features[:, end - h:end].clone()
            next_reactors = [crop.reactor.slice(end - h, end) for crop in crops]
            tags = ['dataset'] * len(crops)
            rollout = np.flatnonzero(self.rng.random(len(crops)) >= p)
            if len(rollout):
                replaced, clips = self._rollout(crops, rollout, history, reactors, i)
                next_history[torch.as_tensor(rollout, dtype=torch.long)] = replaced
                for j, b in enumerate(rollout):
                    next_reactors[b] = clips[j]
                    tags[b] = 'rollout'
            history, reactors = next_history, next_reactors
        return iteration

    def train(self, records: Sequence[InteractionRecord], output_dir=None, show_progress: bool = True) -> TrainResult:
        self.output_dir = Path(output_dir) if output_dir else None
        if self.stats is None:
            self.stats = compute_feature_stats(records)
        batches = _crop_batches(records, self.plan, self.history_frames, self.window_frames)
        prefetcher = None
        if not self.plan.deterministic:
            prefetcher = CropPrefetcher(batches)
            batches = prefetcher

        logger.info(f"🔄 Training for {self.plan.max_iters} iterations "
                    f"(phases at {self.plan.phase_boundaries}, N={self.plan.consecutive_windows})")
        iteration = 0
        progress = tqdm(total=self.plan.max_iters, desc='Training', disable=not show_progress)
        try:
            while iteration < self.plan.max_iters:
                iteration = self._run_batch(next(batches), iteration, progress)
        finally:
            progress.close()
            if prefetcher:
                prefetcher.close()

        losses = pd.DataFrame(self.rows, columns=LOSS_COLUMNS)
        checkpoint = None
        if self.output_dir:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            losses.to_csv(self.output_dir / 'losses.csv', index=False)
            checkpoint = save_checkpoint(self.output_dir / 'model.pt', self.model, self.stats,
                                         {'T': self.sched.T, 'kind': self.sched.kind}, self.optimizer, iteration)
        logger.info(f"✅ Training finished: final total loss {losses['total'].iloc[-1]:.5f}, "
                    f"{self.rollout_calls} rollout sampling calls")
        return TrainResult(losses, self.stats, self.rollout_calls, self.provenance, checkpoint)


def train(records: Sequence[InteractionRecord], model: ReactionDenoiser, sched: Optional[NoiseSchedule] = None,
          plan: Optional[TrainPlan] = None, weights: Optional[LossWeights] = None,
          guidance: Optional[GuidanceConfig] = None, stats: Optional[NormalizationStats] = None,
          output_dir=None, show_progress: bool = True) -> TrainResult:
    trainer = ScheduledTrainer(model, sched, plan, weights, guidance, stats)
    return trainer.train(records, output_dir, show_progress)
