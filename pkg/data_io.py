#!/usr/bin/env python3
"""
Data I/O

Synthetic two-agent interaction records with known reaction rules, the ".mclip"
text format, dataset manifests with normalization stats, training-crop
iteration and an adapter for externally licensed clip pairs.
"""

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

import config
from errors import InvalidInputError, ParseError, UnsupportedVersionError
from motion_core import (
    SMPL22, AgentRole, CanonicalTransform, MotionClip, NormalizationStats, Skeleton,
    canonicalize, detect_foot_contacts, forward_kinematics, wrap_angle,
)

logger = logging.getLogger(__name__)

CLIP_FORMAT = 'mclip'
CLIP_VERSION = 1
MANIFEST_FORMAT = 'reaction-dataset'
MANIFEST_VERSION = 1
MANIFEST_NAME = 'manifest.json'

SCENARIOS = ('mirror', 'follow', 'handshake')
SCENARIO_LABELS = {
    'mirror': 'mirror the actor',
    'follow': 'follow behind the actor',
    'handshake': 'shake hands with the actor',
}

MIRROR_DELAY = 3             # frames
FOLLOW_DISTANCE = 1.0        # meters behind the actor
HANDSHAKE_START = 3.0        # meters between roots at the first frame
HANDSHAKE_CLASP = 0.55       # meters between roots while hands are joined
HANDSHAKE_HEIGHT = 1.05      # meters, clasp point height
HANDSHAKE_MIN_CLASP = 30     # frames
REACH_FRAMES = 15


@dataclass
class InteractionRecord:
    actor: MotionClip
    reactor: MotionClip
    label: str
    scenario: str
    seed: Optional[int] = None

    def __post_init__(self):
        if len(self.actor) != len(self.reactor):
            raise InvalidInputError(f"record clips differ in length: {len(self.actor)} vs {len(self.reactor)}")
        if self.actor.fps != self.reactor.fps:
            raise InvalidInputError("record clips differ in frame rate")

    def __len__(self):
        return len(self.actor)

    @property
    def fps(self):
        return self.actor.fps


@dataclass
class DatasetManifest:
    records: List[Dict]
    stats: NormalizationStats
    vocabulary: List[str]
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        vocab = set(self.vocabulary)
        for entry in self.records:
            missing = set(entry['label'].lower().split()) - vocab
            if missing:
                raise InvalidInputError(f"label of {entry['name']} uses tokens outside the vocabulary: {sorted(missing)}")


def vocabulary_of(labels: Sequence[str]) -> List[str]:
    return sorted({token for label in labels for token in label.lower().split()})


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def _limb_rotations(n: int, rng: np.random.Generator, amplitude) -> np.ndarray:
    """Per-joint local rotations (n, 22, 3, 3) from seeded sinusoidal limb phases."""
    t = np.arange(n) / config.FPS
    freq = rng.uniform(0.8, 1.4)
    phase = 2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi)
    amplitude = np.broadcast_to(np.asarray(amplitude, dtype=np.float64), (n,))
    swing = amplitude * np.sin(phase)
    euler = np.zeros((n, config.JOINT_COUNT, 3))
    euler[:, 1, 0] = -0.45 * swing                                  # left hip
    euler[:, 2, 0] = 0.45 * swing                                   # right hip
    euler[:, 4, 0] = 0.6 * amplitude * np.clip(np.sin(phase), 0, None)   # knees bend backward
    euler[:, 5, 0] = 0.6 * amplitude * np.clip(-np.sin(phase), 0, None)
    euler[:, 16, 0] = 0.35 * swing                                  # shoulders swing against the hips
    euler[:, 17, 0] = -0.35 * swing
    euler[:, 18, 0] = -0.3 * amplitude * (1 + np.sin(phase + 0.5)) / 2
    euler[:, 19, 0] = -0.3 * amplitude * (1 - np.sin(phase + 0.5)) / 2
    euler[:, 3, 1] = 0.08 * swing                                   # spine twist
    return Rotation.from_euler('xyz', euler.reshape(-1, 3)).as_matrix().reshape(n, config.JOINT_COUNT, 3, 3)


def _articulated_clip(root_xz: np.ndarray, yaw: np.ndarray, rng: np.random.Generator, amplitude=1.0,
                      agent_id=AgentRole.ACTOR, skeleton: Skeleton = SMPL22) -> MotionClip:
    n = len(yaw)
    t = np.arange(n) / config.FPS
    height = skeleton.rest_positions[0, 1] - 0.0075 * (1 - np.cos(4 * np.pi * t))
    root = np.stack([root_xz[:, 0], height, root_xz[:, 1]], axis=1)
    positions = forward_kinematics(skeleton, _limb_rotations(n, rng, amplitude), root, yaw)
    return MotionClip(positions, wrap_angle(yaw), config.FPS, agent_id)


def _wandering_actor(n: int, rng: np.random.Generator) -> MotionClip:
    """Actor wandering inside X in [0.6, 1.5] so the mirrored reactor never crosses it."""
    t = np.arange(n) / config.FPS
    x = 1.05 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.05, 0.15) * t + rng.uniform(0, 2 * np.pi))
    z = rng.uniform(-1, 1) + 0.8 * np.sin(2 * np.pi * rng.uniform(0.05, 0.12) * t + rng.uniform(0, 2 * np.pi))
    yaw = rng.uniform(-0.5, 0.5) + 0.6 * np.sin(2 * np.pi * rng.uniform(0.05, 0.1) * t + rng.uniform(0, 2 * np.pi))
    return _articulated_clip(np.stack([x, z], axis=1), yaw, rng)


def mirror_clip(actor: MotionClip, delay: int = MIRROR_DELAY, skeleton: Skeleton = SMPL22) -> MotionClip:
    """Reflection across X = 0 with left/right joints swapped, delayed by `delay` frames."""
    source = np.clip(np.arange(len(actor)) - delay, 0, None)
    positions = actor.positions[source][:, list(skeleton.mirror_index)] * np.array([-1.0, 1.0, 1.0])
    return MotionClip(positions, wrap_angle(-actor.root_yaw[source]), actor.fps, AgentRole.REACTOR)


def follow_clip(actor: MotionClip, distance: float = FOLLOW_DISTANCE) -> MotionClip:
    heading = np.stack([np.sin(actor.root_yaw), np.zeros(len(actor)), np.cos(actor.root_yaw)], axis=1)
    positions = actor.positions - distance * heading[:, None]
    return MotionClip(positions, actor.root_yaw.copy(), actor.fps, AgentRole.REACTOR)


def _two_bone_ik(shoulder, target, upper, lower, pole=np.array([0.0, -1.0, 0.0])):
    """Elbow and wrist positions reaching from `shoulder` toward `target` (clamped to arm reach)."""
    offset = target - shoulder
    distance = np.linalg.norm(offset, axis=-1, keepdims=True)
    direction = offset / np.maximum(distance, 1e-9)
    reach = np.clip(distance, abs(upper - lower) + 1e-6, upper + lower - 1e-9)
    along = (upper ** 2 - lower ** 2 + reach ** 2) / (2 * reach)
    across = np.sqrt(np.maximum(upper ** 2 - along ** 2, 0.0))
    bend = pole - np.sum(pole * direction, axis=-1, keepdims=True) * direction
    bend /= np.maximum(np.linalg.norm(bend, axis=-1, keepdims=True), 1e-9)
    elbow = shoulder + along * direction + across * bend
    wrist = np.where(distance <= upper + lower - 1e-9, target, shoulder + reach * direction)
    return elbow, wrist


def _handshake_pair(n: int, rng: np.random.Generator, skeleton: Skeleton = SMPL22) -> Tuple[MotionClip, MotionClip]:
    approach = min(int(0.4 * n), n - HANDSHAKE_MIN_CLASP)
    angle = rng.uniform(-np.pi, np.pi)
    axis = np.array([np.sin(angle), np.cos(angle)])
    center = rng.uniform(-1.0, 1.0, size=2)
    progress = np.clip(np.arange(n) / max(approach, 1), 0.0, 1.0)
    progress = progress * progress * (3 - 2 * progress)
    separation = HANDSHAKE_START + (HANDSHAKE_CLASP - HANDSHAKE_START) * progress
    amplitude = np.where(np.arange(n) < approach, 1.0, 0.15)

    actor = _articulated_clip(center + axis * separation[:, None] / 2, np.full(n, np.arctan2(-axis[0], -axis[1])),
                              rng, amplitude, AgentRole.ACTOR, skeleton)
    reactor = _articulated_clip(center - axis * separation[:, None] / 2, np.full(n, np.arctan2(axis[0], axis[1])),
                                rng, amplitude, AgentRole.REACTOR, skeleton)

    # right arms reach for the point between both right shoulders
    shoulder, elbow, wrist = 17, 19, 21
    offsets = skeleton.rest_offsets
    upper, lower = np.linalg.norm(offsets[elbow]), np.linalg.norm(offsets[wrist])
    clasp = (actor.positions[:, shoulder] + reactor.positions[:, shoulder]) / 2
    clasp[:, 1] = HANDSHAKE_HEIGHT
    weight = np.clip((np.arange(n) - (approach - REACH_FRAMES)) / REACH_FRAMES, 0.0, 1.0)[:, None]
    for clip in (actor, reactor):
        target = (1 - weight) * clip.positions[:, wrist] + weight * clasp
        clip.positions[:, elbow], clip.positions[:, wrist] = _two_bone_ik(
            clip.positions[:, shoulder], target, upper, lower)
    return actor, reactor


def synth_generate(scenario: str, duration_frames: int, seed: int,
                   history: int = config.HISTORY_FRAMES, window: int = config.WINDOW_FRAMES) -> InteractionRecord:
    """One synthetic record whose reactor is a closed-form function of the actor."""
    if scenario not in SCENARIOS:
        raise InvalidInputError(f"unknown scenario {scenario!r}, expected one of {SCENARIOS}")
    if duration_frames < history + window:
        raise InvalidInputError(f"duration must be at least {history + window} frames, got {duration_frames}")
    if scenario == 'handshake' and duration_frames < HANDSHAKE_MIN_CLASP + REACH_FRAMES:
        raise InvalidInputError("handshake needs room for the approach and a 30-frame clasp")

    rng = np.random.default_rng(seed)
    if scenario == 'handshake':
        actor, reactor = _handshake_pair(duration_frames, rng)
    else:
        actor = _wandering_actor(duration_frames, rng)
        reactor = mirror_clip(actor) if scenario == 'mirror' else follow_clip(actor)
    return InteractionRecord(actor, reactor, SCENARIO_LABELS[scenario], scenario, seed)


def synth_dataset(scenario: str, clips: int, duration_frames: int, seed: int) -> List[InteractionRecord]:
    scenarios = SCENARIOS if scenario == 'all' else (scenario,)
    records = []
    for i in range(clips):
        records.append(synth_generate(scenarios[i % len(scenarios)], duration_frames, seed + i))
    logger.info(f"✅ Generated {len(records)} synthetic records ({scenario}, {duration_frames} frames each)")
    return records


# ---------------------------------------------------------------------------
# External data
# ---------------------------------------------------------------------------

def estimate_root_yaw(positions, skeleton: Skeleton = SMPL22) -> np.ndarray:
    """Heading from the hip line: left hip minus right hip points along +X at yaw 0."""
    across = positions[:, skeleton.joint_names.index('left_hip')] - positions[:, skeleton.joint_names.index('right_hip')]
    return wrap_angle(np.arctan2(-across[:, 2], across[:, 0]))


def _resample(values: np.ndarray, source_fps: float, target_fps: float) -> np.ndarray:
    n = len(values)
    duration = (n - 1) / source_fps
    target_n = int(np.floor(duration * target_fps + 1e-9)) + 1
    source_t = np.arange(n) / source_fps
    target_t = np.arange(target_n) / target_fps
    flat = values.reshape(n, -1)
    out = np.stack([np.interp(target_t, source_t, flat[:, d]) for d in range(flat.shape[1])], axis=1)
    return out.reshape((target_n,) + values.shape[1:])


def adapt_external_pair(clip_a, clip_b, label: str, actor_index: int = 0,
                        source_fps: float = config.FPS, yaw_a=None, yaw_b=None) -> InteractionRecord:
    """
    Wrap a licensed two-person clip pair (joint positions, SMPL-22 order, Y up, meters).

    `actor_index` follows the dataset's actor/reactor annotation (0: clip_a acts).
    Root yaw is estimated from the hips when not given; both clips are resampled to 30 fps.
    """
    if actor_index not in (0, 1):
        raise InvalidInputError("actor_index must be 0 or 1")
    clips = []
    for positions, yaw in ((clip_a, yaw_a), (clip_b, yaw_b)):
        positions = np.asarray(positions, dtype=np.float64)
        if positions.ndim != 3 or positions.shape[1:] != (config.JOINT_COUNT, 3):
            raise InvalidInputError(f"external clip must be (frames, {config.JOINT_COUNT}, 3)")
        yaw = estimate_root_yaw(positions) if yaw is None else np.unwrap(np.asarray(yaw, dtype=np.float64))
        if source_fps != config.FPS:
            positions = _resample(positions, source_fps, config.FPS)
            yaw = _resample(np.unwrap(yaw), source_fps, config.FPS)
        clips.append((positions, wrap_angle(yaw)))
    (actor_pos, actor_yaw), (reactor_pos, reactor_yaw) = clips if actor_index == 0 else clips[::-1]
    return InteractionRecord(MotionClip(actor_pos, actor_yaw, config.FPS, AgentRole.ACTOR),
                             MotionClip(reactor_pos, reactor_yaw, config.FPS, AgentRole.REACTOR),
                             label, 'external')


# ---------------------------------------------------------------------------
# .mclip files
# ---------------------------------------------------------------------------

def write_clip(path, clip: MotionClip, skeleton: Skeleton = SMPL22) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        'format': CLIP_FORMAT, 'version': CLIP_VERSION, 'fps': clip.fps,
        'joint_count': skeleton.joint_count, 'joint_names': list(skeleton.joint_names),
        'agent_id': clip.agent_id.value, 'frames': len(clip),
    }
    rows = np.concatenate([clip.positions.reshape(len(clip), -1), clip.root_yaw[:, None]], axis=1)
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(json.dumps(header) + '\n')
        for row in rows:
            handle.write(' '.join('%.17g' % value for value in row) + '\n')
    return path


def read_clip_header(path) -> Dict:
    path = Path(path)
    with open(path, encoding='utf-8') as handle:
        return _parse_header(path, handle.readline())


def _parse_header(path, line) -> Dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(path, 1, f"invalid header: {e.msg}")
    if not isinstance(header, dict) or header.get('format') != CLIP_FORMAT:
        raise UnsupportedVersionError(f"{path}: not a {CLIP_FORMAT} file")
    if header.get('version') != CLIP_VERSION:
        raise UnsupportedVersionError(f"{path}: {CLIP_FORMAT} version {header.get('version')} is not supported")
    for key in ('fps', 'joint_count', 'joint_names', 'agent_id', 'frames'):
        if key not in header:
            raise ParseError(path, 1, f"header is missing '{key}'")
    return header


def read_clip(path) -> MotionClip:
    path = Path(path)
    with open(path, encoding='utf-8') as handle:
        lines = handle.read().split('\n')
    if lines and lines[-1] == '':
        lines.pop()
    if not lines:
        raise ParseError(path, 1, "empty file")
    header = _parse_header(path, lines[0])
    joint_count = int(header['joint_count'])
    width = joint_count * 3 + 1
    frames = int(header['frames'])
    rows = np.zeros((frames, width))
    for i in range(frames):
        line_no = i + 2
        if line_no > len(lines):
            raise ParseError(path, line_no, f"expected {frames} frames, file ends after {i}")
        parts = lines[line_no - 1].split()
        if len(parts) != width:
            raise ParseError(path, line_no, f"expected {width} numbers, found {len(parts)}")
        try:
            rows[i] = [float(p) for p in parts]
        except ValueError:
            raise ParseError(path, line_no, "non-numeric value")
    if len(lines) > frames + 1:
        raise ParseError(path, frames + 2, "unexpected data after the last frame")
    if joint_count != config.JOINT_COUNT:
        raise InvalidInputError(f"{path}: skeleton has {joint_count} joints, expected {config.JOINT_COUNT}")
    return MotionClip(rows[:, :-1].reshape(frames, joint_count, 3), rows[:, -1], float(header['fps']),
                      AgentRole(header['agent_id']))


def save_record(record: InteractionRecord, directory, name: str) -> Dict:
    """Write the record's two clips and return its manifest entry."""
    directory = Path(directory)
    entry = {
        'name': name, 'scenario': record.scenario, 'label': record.label, 'seed': record.seed,
        'frames': len(record), 'actor': f"{name}.actor.mclip", 'reactor': f"{name}.reactor.mclip",
    }
    write_clip(directory / entry['actor'], record.actor)
    write_clip(directory / entry['reactor'], record.reactor)
    return entry


def load_record(directory, entry: Dict) -> InteractionRecord:
    directory = Path(directory)
    actor = read_clip(directory / entry['actor'])
    reactor = read_clip(directory / entry['reactor'])
    return InteractionRecord(actor, reactor, entry['label'], entry['scenario'], entry.get('seed'))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def record_features(record: InteractionRecord, skeleton: Skeleton = SMPL22) -> np.ndarray:
    features, _ = canonicalize(record.reactor, record.actor, skeleton=skeleton)
    return features


def compute_feature_stats(records: Sequence[InteractionRecord]) -> NormalizationStats:
    if not records:
        raise InvalidInputError("cannot compute stats of an empty dataset")
    return NormalizationStats.from_features(np.concatenate([record_features(r) for r in records]))


def save_dataset(records: Sequence[InteractionRecord], directory) -> DatasetManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = [save_record(record, directory, f"record_{i:04d}") for i, record in enumerate(records)]
    manifest = DatasetManifest(entries, compute_feature_stats(records), vocabulary_of([r.label for r in records]))
    payload = {
        'format': MANIFEST_FORMAT, 'version': manifest.version, 'records': entries,
        'stats': {'mean': manifest.stats.mean.tolist(), 'std': manifest.stats.std.tolist()},
        'vocabulary': manifest.vocabulary,
    }
    with open(directory / MANIFEST_NAME, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=1)
    logger.info(f"💾 Saved {len(entries)} records to {directory}")
    return manifest


def load_manifest(directory) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    try:
        with open(path, encoding='utf-8') as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, e.msg)
    if payload.get('format') != MANIFEST_FORMAT:
        raise UnsupportedVersionError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    if payload.get('version') != MANIFEST_VERSION:
        raise UnsupportedVersionError(f"{path}: manifest version {payload.get('version')} is not supported")
    stats = NormalizationStats(np.array(payload['stats']['mean']), np.array(payload['stats']['std']))
    return DatasetManifest(payload['records'], stats, payload['vocabulary'], payload['version'])


def load_dataset(directory) -> Tuple[List[InteractionRecord], DatasetManifest]:
    manifest = load_manifest(directory)
    records = [load_record(directory, entry) for entry in manifest.records]
    logger.info(f"📊 Loaded {len(records)} records from {directory}")
    return records, manifest


# ---------------------------------------------------------------------------
# Training crops
# ---------------------------------------------------------------------------

@dataclass
class TrainingCrop:
    """h + N*k consecutive frames of one record, canonicalized once at the crop start."""

    record: InteractionRecord
    record_index: int
    offset: int
    history: int
    window: int
    windows: int
    contacts: Tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)

    @property
    def length(self):
        return self.history + self.windows * self.window

    @property
    def label(self):
        return self.record.label

    @cached_property
    def reactor(self) -> MotionClip:
        return self.record.reactor.slice(self.offset, self.offset + self.length)

    @cached_property
    def actor(self) -> MotionClip:
        return self.record.actor.slice(self.offset, self.offset + self.length)

    @cached_property
    def encoded(self) -> Tuple[np.ndarray, CanonicalTransform]:
        # one leading frame when the record has it, so frame 0 gets a backward difference as in canonical_history
        lead = 1 if self.offset > 0 else 0
        span = slice(self.offset - lead, self.offset + self.length)
        cx, cy = (None, None) if self.contacts is None else (self.contacts[0][span], self.contacts[1][span])
        reactor = self.record.reactor.slice(span.start, span.stop)
        actor = self.record.actor.slice(span.start, span.stop)
        features, transform = canonicalize(reactor, actor, lead, cx, cy)
        return features[lead:], transform

    @property
    def features(self) -> np.ndarray:
        return self.encoded[0]

    @property
    def transform(self) -> CanonicalTransform:
        return self.encoded[1]

    def window_frames(self, i: int) -> np.ndarray:
        start = self.history + i * self.window
        return self.features[start:start + self.window]

    def history_frames(self, i: int) -> np.ndarray:
        start = self.history + i * self.window
        return self.features[start - self.history:start]


def crop_windows(records: Sequence[InteractionRecord], windows: int = config.CONSECUTIVE_WINDOWS,
                 history: int = config.HISTORY_FRAMES, window: int = config.WINDOW_FRAMES,
                 seed: int = 0, count: Optional[int] = None) -> Iterator[TrainingCrop]:
    """Random-offset crops of N consecutive windows plus their history; endless unless `count` is set."""
    if windows < 1:
        raise InvalidInputError("at least one window per crop is required")
    span = history + windows * window
    usable = []
    for i, record in enumerate(records):
        if len(record) < span:
            logger.warning(f"⚠️ Skipping record {i}: {len(record)} frames < {span} needed")
            continue
        usable.append(i)
    if not usable:
        raise InvalidInputError(f"no record has the {span} frames a crop needs")

    contacts = {}
    rng = np.random.default_rng(seed)
    produced = 0
    while count is None or produced < count:
        index = usable[rng.integers(len(usable))]
        record = records[index]
        offset = int(rng.integers(len(record) - span + 1))
        if index not in contacts:
            contacts[index] = (detect_foot_contacts(record.reactor), detect_foot_contacts(record.actor))
        yield TrainingCrop(record, index, offset, history, window, windows, contacts[index])
        produced += 1
