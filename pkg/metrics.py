#!/usr/bin/env python3
"""
Metrics

Evaluation suite for generated reactions:
- motion-feature FID, diversity and multimodal distance
- physical plausibility (ground penetration, floating, foot skating)
- interpenetration volume between the two agents
- cross-distance FID / diversity in the inter-agent joint distance space
- tracking errors of a controller following planned motion

Mesh quantities are approximated by spheres around joints, and motion features
come from a fixed kinematic descriptor rather than a learned extractor, so values
are only comparable with each other.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import eigh

import config
from denoiser import embed_text
from errors import InvalidInputError, ParseError
from motion_core import SMPL22, MotionClip, Skeleton, detect_foot_contacts, finite_difference, rotate_y

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 4 * config.JOINT_COUNT * 3 + 2 + 4   # 270
PSD_TOLERANCE = 1e-8
Radii = Union[float, Sequence[float], np.ndarray]


# ---------------------------------------------------------------------------
# Motion features
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4)
def _projection(seed: int = config.FEATURE_PROJECTION_SEED, dim: int = config.MOTION_FEATURE_DIM) -> np.ndarray:
    """Fixed (270, dim) matrix with orthonormal columns."""
    gaussian = np.random.default_rng(seed).normal(size=(DESCRIPTOR_DIM, dim))
    q, r = np.linalg.qr(gaussian)
    return q * np.sign(np.diag(r))


def motion_descriptor(window: MotionClip, skeleton: Skeleton = SMPL22) -> np.ndarray:
    """Means/stds of heading-frame joint positions and velocities, root speed and contact rates."""
    if len(window) < 2:
        raise InvalidInputError(f"feature extraction needs at least 2 frames, got {len(window)}")
    positions, yaw = window.positions, window.root_yaw
    origin = positions[:, 0] * np.array([1.0, 0.0, 1.0])
    local = rotate_y(positions - origin[:, None], -yaw[:, None])
    velocity = rotate_y(finite_difference(positions, window.fps), -yaw[:, None])
    speed = np.linalg.norm(velocity[:, 0, [0, 2]], axis=-1)
    contacts = detect_foot_contacts(window, skeleton)
    return np.concatenate([
        local.mean(axis=0).ravel(), local.std(axis=0).ravel(),
        velocity.mean(axis=0).ravel(), velocity.std(axis=0).ravel(),
        [speed.mean(), speed.std()], contacts.mean(axis=0),
    ])


def extract_motion_features(window: MotionClip, skeleton: Skeleton = SMPL22) -> np.ndarray:
    return motion_descriptor(window, skeleton) @ _projection()


def text_features(label: Optional[str]) -> np.ndarray:
    """Label embedding in the motion feature space (hashed tokens, not a learned encoder)."""
    return embed_text(label, config.MOTION_FEATURE_DIM).text_embed


# ---------------------------------------------------------------------------
# Distribution metrics
# ---------------------------------------------------------------------------

@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise InvalidInputError(f"covariance must be {d}x{d}, got {self.cov.shape}")
        if not np.allclose(self.cov, self.cov.T, atol=PSD_TOLERANCE):
            raise InvalidInputError("covariance must be symmetric")

    @classmethod
    def from_features(cls, features) -> 'FeatureStats':
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if len(features) < 2:
            return cls(features.mean(axis=0), np.zeros((features.shape[1], features.shape[1])), len(features))
        return cls(features.mean(axis=0), np.cov(features, rowvar=False), len(features))

    @property
    def dim(self):
        return self.mean.shape[0]


def _psd_eigen(matrix: np.ndarray, name: str) -> Tuple[np.ndarray, np.ndarray]:
    values, vectors = eigh((matrix + matrix.T) / 2)
    tolerance = PSD_TOLERANCE * max(1.0, float(np.abs(values).max(initial=0.0)))
    if values.size and values.min() < -tolerance:
        raise InvalidInputError(f"{name} is not positive semidefinite (eigenvalue {values.min():.3e})")
    return np.clip(values, 0.0, None), vectors


def fid(stats_a: FeatureStats, stats_b: FeatureStats) -> float:
    """Frechet distance between two Gaussians, via symmetric eigendecompositions."""
    if stats_a.dim != stats_b.dim:
        raise InvalidInputError(f"feature dimensions differ: {stats_a.dim} vs {stats_b.dim}")
    values_a, vectors_a = _psd_eigen(stats_a.cov, 'covariance A')
    _psd_eigen(stats_b.cov, 'covariance B')
    sqrt_a = (vectors_a * np.sqrt(values_a)) @ vectors_a.T
    inner, _ = _psd_eigen(sqrt_a @ stats_b.cov @ sqrt_a, 'covariance product')
    diff = stats_a.mean - stats_b.mean
    value = diff @ diff + np.trace(stats_a.cov) + np.trace(stats_b.cov) - 2.0 * np.sqrt(inner).sum()
    return float(max(value, 0.0))


def diversity(features, subset: int = config.DIVERSITY_SUBSET, seed: int = 0) -> float:
    """Mean distance between matched elements of two disjoint random subsets."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = len(features)
    if n < 2:
        raise InvalidInputError("diversity needs at least 2 samples")
    if n < 2 * subset:
        logger.warning(f"⚠️ Only {n} samples; diversity subset shrinks from {subset} to {n // 2}")
        subset = n // 2
    order = np.random.default_rng(seed).permutation(n)
    first, second = features[order[:subset]], features[order[subset:2 * subset]]
    return float(np.linalg.norm(first - second, axis=1).mean())


def mmdist(motion_features, text_feats) -> float:
    motion_features = np.atleast_2d(np.asarray(motion_features, dtype=np.float64))
    text_feats = np.atleast_2d(np.asarray(text_feats, dtype=np.float64))
    if motion_features.shape != text_feats.shape:
        raise InvalidInputError(f"paired features differ in shape: {motion_features.shape} vs {text_feats.shape}")
    return float(np.linalg.norm(motion_features - text_feats, axis=1).mean())


# ---------------------------------------------------------------------------
# Physical plausibility
# ---------------------------------------------------------------------------

@dataclass
class PhysicsMetrics:
    penetration: float   # mm
    floating: float      # mm
    skating: float       # mm per contact frame

    def __iter__(self):
        return iter((self.penetration, self.floating, self.skating))


def _radii(joint_radius: Radii, count: int) -> np.ndarray:
    radii = np.broadcast_to(np.asarray(joint_radius, dtype=np.float64), (count,)).copy()
    if np.any(radii < 0):
        raise InvalidInputError("joint radii must be >= 0")
    return radii


def physics_metrics(clip: MotionClip, skeleton: Skeleton = SMPL22,
                    joint_radius: Radii = config.JOINT_RADIUS, contacts=None) -> PhysicsMetrics:
    """
    Ground penetration and floating of the lowest joint-sphere bottom, and foot skating.

    Penetration averages frames whose lowest bottom is below ground; floating averages
    frames above ground without any foot contact; skating is the mean horizontal
    displacement since the previous frame of every foot labelled in contact.
    """
    if len(clip) == 0:
        raise InvalidInputError("physics metrics need a non-empty clip")
    radii = _radii(joint_radius, skeleton.joint_count)
    contacts = detect_foot_contacts(clip, skeleton) if contacts is None else np.asarray(contacts)
    lowest = (clip.positions[..., 1] - radii).min(axis=1)

    below = lowest < 0
    penetration = float(-lowest[below].mean() * 1000.0) if below.any() else 0.0
    airborne = (lowest > 0) & ~contacts.any(axis=1)
    floating = float(lowest[airborne].mean() * 1000.0) if airborne.any() else 0.0

    feet = clip.positions[:, list(skeleton.foot_joint_ids)]
    step = np.linalg.norm(np.diff(feet[..., [0, 2]], axis=0), axis=-1)
    in_contact = contacts[1:] > 0.5
    skating = float(step[in_contact].mean() * 1000.0) if in_contact.any() else 0.0
    return PhysicsMetrics(penetration, floating, skating)


def _overlap_volume(points_x, radii_x, points_y, radii_y, voxel: float) -> float:
    """Volume (m^3) of the intersection of two sphere unions, by voxel counting."""
    distance = np.linalg.norm(points_x[:, None] - points_y[None], axis=-1)
    pairs = distance < radii_x[:, None] + radii_y[None]
    if not pairs.any():
        return 0.0
    # a point inside both unions lies in some overlapping (x, y) sphere pair
    ix, iy = np.nonzero(pairs)
    lows = np.maximum(points_x[ix] - radii_x[ix, None], points_y[iy] - radii_y[iy, None])
    highs = np.minimum(points_x[ix] + radii_x[ix, None], points_y[iy] + radii_y[iy, None])
    low, high = lows.min(axis=0), highs.max(axis=0)
    axes = [low[d] + (np.arange(max(int(math.ceil((high[d] - low[d]) / voxel)), 1)) + 0.5) * voxel for d in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, 3)

    def inside(points, radii, members):
        hit = np.zeros(len(grid), dtype=bool)
        for j in np.unique(members):
            hit |= np.sum((grid - points[j]) ** 2, axis=1) <= radii[j] ** 2
        return hit

    both = inside(points_x, radii_x, ix) & inside(points_y, radii_y, iy)
    return float(both.sum()) * voxel ** 3


def interpenetration_volume(clip_x: MotionClip, clip_y: MotionClip, skeleton: Skeleton = SMPL22,
                            joint_radii: Radii = config.JOINT_RADIUS, voxel: float = config.VOXEL_SIZE) -> float:
    """Maximum over frames of the overlap volume between both agents' joint spheres, in liters."""
    if len(clip_x) != len(clip_y):
        raise InvalidInputError("interpenetration needs equal-length clips")
    if voxel <= 0:
        raise InvalidInputError("voxel size must be positive")
    radii = _radii(joint_radii, skeleton.joint_count)
    volumes = [_overlap_volume(clip_x.positions[i], radii, clip_y.positions[i], radii, voxel)
               for i in range(len(clip_x))]
    return max(volumes, default=0.0) * 1000.0


# ---------------------------------------------------------------------------
# Cross-distance metrics
# ---------------------------------------------------------------------------

def _joint_positions(pose) -> np.ndarray:
    if isinstance(pose, MotionClip):
        return pose.positions
    return np.asarray(getattr(pose, 'joint_positions', pose), dtype=np.float64)


def cross_distance_features(pose_x, pose_y, skeleton: Skeleton = SMPL22) -> np.ndarray:
    """Row-major 10x10 distances from reactor joints (rows) to actor joints; works per frame or per clip."""
    ids = list(skeleton.cross_distance_ids)
    a = _joint_positions(pose_x)[..., ids, :]
    b = _joint_positions(pose_y)[..., ids, :]
    distance = np.linalg.norm(a[..., :, None, :] - b[..., None, :, :], axis=-1)
    return distance.reshape(distance.shape[:-2] + (len(ids) ** 2,))


def window_cross_features(windows_x, windows_y, skeleton: Skeleton = SMPL22) -> np.ndarray:
    """One 100-d vector per window pair: the mean of its per-frame cross-distance features."""
    if len(windows_x) != len(windows_y):
        raise InvalidInputError("reactor and actor window counts differ")
    return np.stack([cross_distance_features(x, y, skeleton).mean(axis=0) for x, y in zip(windows_x, windows_y)])


def fid_cd(windows_x, windows_y, reference_x, reference_y, skeleton: Skeleton = SMPL22) -> float:
    generated = FeatureStats.from_features(window_cross_features(windows_x, windows_y, skeleton))
    reference = FeatureStats.from_features(window_cross_features(reference_x, reference_y, skeleton))
    return fid(generated, reference)


def div_cd(windows_x, windows_y, subset: int = config.DIVERSITY_SUBSET, seed: int = 0,
           skeleton: Skeleton = SMPL22) -> float:
    return diversity(window_cross_features(windows_x, windows_y, skeleton), subset, seed)


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------

def tracking_errors(tracked: MotionClip, goal: MotionClip, fail_distance: float = 0.5) -> Dict[str, float]:
    """Per-joint position, velocity and acceleration errors (mm); failure once any frame drifts too far."""
    if len(tracked) != len(goal):
        raise InvalidInputError("tracked and goal clips differ in length")
    error = np.linalg.norm(tracked.positions - goal.positions, axis=-1)
    vel = np.diff(tracked.positions, axis=0) - np.diff(goal.positions, axis=0)
    acc = np.diff(tracked.positions, n=2, axis=0) - np.diff(goal.positions, n=2, axis=0)
    return {
        'mpjpe_mm': float(error.mean() * 1000.0),
        'vel_error_mm': float(np.linalg.norm(vel, axis=-1).mean() * 1000.0) if len(vel) else 0.0,
        'acc_error_mm': float(np.linalg.norm(acc, axis=-1).mean() * 1000.0) if len(acc) else 0.0,
        'success': bool((error.mean(axis=1) <= fail_distance).all()),
    }


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    fid: float
    diversity: float
    mmdist: float
    penetration: float
    floating: float
    skating: float
    iv: float
    fid_cd: float
    div_cd: float
    extra: Dict[str, float] = field(default_factory=dict)

    UNITS = {
        'fid': '', 'diversity': '', 'mmdist': '', 'penetration': 'mm', 'floating': 'mm',
        'skating': 'mm/frame', 'iv': 'L', 'fid_cd': '', 'div_cd': '',
    }

    def __post_init__(self):
        for name in self.UNITS:
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidInputError(f"metric {name} must be finite and >= 0, got {value}")

    def values(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in self.UNITS}

    def to_text(self) -> str:
        lines = ['# reaction metrics (penetration/floating in mm, skating in mm per contact frame, iv in liters)']
        for name, value in {**self.values(), **self.extra}.items():
            lines.append(f"{name}: {value:.6f} {self.UNITS.get(name, '')}".rstrip())
        return '\n'.join(lines) + '\n'

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding='utf-8')
        return path

    @classmethod
    def from_text(cls, text: str) -> 'MetricReport':
        values = parse_report(text)
        known = {f.name for f in fields(cls) if f.name != 'extra'}
        missing = sorted(known - set(values))
        if missing:
            raise ParseError('<report>', 0, f"missing metrics: {', '.join(missing)}")
        return cls(**{name: values[name] for name in known},
                   extra={name: value for name, value in values.items() if name not in known})


def parse_report(text: str) -> Dict[str, float]:
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        name, _, rest = line.partition(':')
        try:
            values[name.strip()] = float(rest.split()[0])
        except (IndexError, ValueError):
            raise ParseError('<report>', number, f"expected 'name: value unit', got {line!r}")
    return values


def split_windows(clip: MotionClip, window: int) -> List[MotionClip]:
    return [clip.slice(start, start + window) for start in range(0, len(clip) - window + 1, window)]


def evaluate(generated, reference, window: int = config.WINDOW_FRAMES, subset: int = config.DIVERSITY_SUBSET,
             seed: int = 0, skeleton: Skeleton = SMPL22,
             joint_radius: Radii = config.JOINT_RADIUS) -> Tuple[MetricReport, pd.DataFrame]:
    """
    Compare generated interaction records against reference records.

    Reactor clips are cut into non-overlapping windows for the distribution metrics;
    physics metrics are averaged over generated clips and IV is the mean of the
    per-record maxima.
    """
    if not generated or not reference:
        raise InvalidInputError("evaluation needs generated and reference records")

    def windowed(records):
        rows, reactors, actors = [], [], []
        for index, record in enumerate(records):
            for w, (x, y) in enumerate(zip(split_windows(record.reactor, window), split_windows(record.actor, window))):
                rows.append((index, w, record.label))
                reactors.append(x)
                actors.append(y)
        if not reactors:
            raise InvalidInputError(f"no record has a full window of {window} frames")
        return rows, reactors, actors

    gen_rows, gen_x, gen_y = windowed(generated)
    _, ref_x, ref_y = windowed(reference)
    logger.info(f"📊 Evaluating {len(gen_x)} generated windows against {len(ref_x)} reference windows")

    gen_features = np.stack([extract_motion_features(x, skeleton) for x in gen_x])
    ref_features = np.stack([extract_motion_features(x, skeleton) for x in ref_x])
    labels = np.stack([text_features(label) for _, _, label in gen_rows])

    physics = [physics_metrics(record.reactor, skeleton, joint_radius) for record in generated]
    volumes = [interpenetration_volume(record.reactor, record.actor, skeleton, joint_radius) for record in generated]

    report = MetricReport(
        fid=fid(FeatureStats.from_features(gen_features), FeatureStats.from_features(ref_features)),
        diversity=diversity(gen_features, subset, seed) if len(gen_features) >= 2 else 0.0,
        mmdist=mmdist(gen_features, labels),
        penetration=float(np.mean([p.penetration for p in physics])),
        floating=float(np.mean([p.floating for p in physics])),
        skating=float(np.mean([p.skating for p in physics])),
        iv=float(np.mean(volumes)),
        fid_cd=fid_cd(gen_x, gen_y, ref_x, ref_y, skeleton),
        div_cd=div_cd(gen_x, gen_y, subset, seed, skeleton) if len(gen_x) >= 2 else 0.0,
    )

    table = []
    for (index, w, label), x, y in zip(gen_rows, gen_x, gen_y):
        p = physics_metrics(x, skeleton, joint_radius)
        table.append({
            'record': index, 'window': w, 'label': label,
            'penetration': p.penetration, 'floating': p.floating, 'skating': p.skating,
            'iv': interpenetration_volume(x, y, skeleton, joint_radius),
            'cross_distance': float(cross_distance_features(x, y, skeleton).mean()),
        })
    logger.info(f"✅ Evaluation finished: FID {report.fid:.4f}, IV {report.iv:.4f} L")
    return report, pd.DataFrame(table)
