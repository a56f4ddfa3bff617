#!/usr/bin/env python3
"""
Reaction Reward

Actor-aware reward shaping for a tracking controller that follows planned reactions.
When the captured actor deviates from what the planner predicted, the goal reward is
interpolated away from imitating the plan toward a safe default pose and keeping
distance from the actor.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

import config
from errors import DegenerateInputError, InvalidInputError
from motion_core import GlobalPose, wrap_angle

logger = logging.getLogger(__name__)

PoseLike = Union[GlobalPose, np.ndarray]


@dataclass
class RewardConfig:
    imitation_sharpness: float = config.REWARD_SHARPNESS   # k_p
    default_sharpness: float = config.REWARD_SHARPNESS
    default_scale: float = config.DEFAULT_REWARD_SCALE
    root_saturation: float = config.ROOT_SATURATION
    similarity_joints: int = config.SIMILARITY_JOINTS
    safety_floor: float = 0.5       # minimum r_root the tracker keeps once w passes safety_threshold
    safety_threshold: float = 0.5

    def __post_init__(self):
        if self.imitation_sharpness <= 0 or self.default_sharpness <= 0:
            raise InvalidInputError("reward sharpness must be positive")
        if self.root_saturation <= 0:
            raise InvalidInputError("root saturation distance must be positive")
        if self.similarity_joints not in (config.JOINT_COUNT, 24):
            raise InvalidInputError(f"similarity joints must be {config.JOINT_COUNT} or 24")
        if not 0 <= self.safety_floor <= 1 or not 0 <= self.safety_threshold <= 1:
            raise InvalidInputError("safety floor and threshold must lie in [0, 1]")


@dataclass
class RewardBreakdown:
    w: float
    r_imitation: float
    r_default: float
    r_root: float
    r_total: float

    def to_dict(self):
        return asdict(self)


def _positions(pose: PoseLike) -> np.ndarray:
    positions = pose.joint_positions if isinstance(pose, GlobalPose) else pose
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[-2:] != (config.JOINT_COUNT, 3):
        raise InvalidInputError(f"pose must be ({config.JOINT_COUNT}, 3), got {positions.shape}")
    return positions


def deviation_weight(y_hat, y_real, reward_config: Optional[RewardConfig] = None) -> float:
    """
    Deviation of the captured actor window from the predicted one, in [0, 1].

    Per frame the cosine similarity of flattened root-relative joint positions is taken;
    w = (1 - mean similarity) / 2. With 24 similarity joints two zero joints are appended.
    """
    reward_config = reward_config or RewardConfig()
    y_hat, y_real = _positions(y_hat), _positions(y_real)
    if y_hat.ndim != 3 or y_hat.shape != y_real.shape or len(y_hat) == 0:
        raise InvalidInputError(f"actor windows must be equal-length (T, 22, 3), got {y_hat.shape} and {y_real.shape}")

    def frame_vectors(window):
        relative = window - window[:, :1]
        pad = reward_config.similarity_joints - config.JOINT_COUNT
        if pad:
            relative = np.concatenate([relative, np.zeros((len(window), pad, 3))], axis=1)
        return relative.reshape(len(window), -1)

    a, b = frame_vectors(y_hat), frame_vectors(y_real)
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateInputError("actor frame with zero-norm root-relative pose")
    similarity = np.sum(a * b, axis=1) / norms
    return float(np.clip(0.5 * (1.0 - similarity.mean()), 0.0, 1.0))


def reward_default(pose: PoseLike, rest_pose: PoseLike, reward_config: Optional[RewardConfig] = None) -> float:
    """0.5 * exp(-100 * mean per-joint distance) to the default standing pose."""
    reward_config = reward_config or RewardConfig()
    distance = np.linalg.norm(_positions(pose) - _positions(rest_pose), axis=-1).mean()
    return float(reward_config.default_scale * np.exp(-reward_config.default_sharpness * distance))


def reward_root(root_pos, actor_root_real, reward_config: Optional[RewardConfig] = None) -> float:
    """Linear in root separation: min(d, 0.4) / 0.4, so nothing is gained beyond 0.4 m."""
    # max(d, 0.4) / 0.4 is the other reading of this term; the saturating min form is kept
    reward_config = reward_config or RewardConfig()
    distance = float(np.linalg.norm(np.asarray(root_pos, dtype=np.float64) - np.asarray(actor_root_real, dtype=np.float64)))
    if not np.isfinite(distance):
        raise InvalidInputError("root positions must be finite")
    return min(distance, reward_config.root_saturation) / reward_config.root_saturation


def reward_imitation(pose: PoseLike, goal_pose: PoseLike, reward_config: Optional[RewardConfig] = None) -> float:
    """Keypoint term of the tracking reward: exp(-k_p * mean squared joint error)."""
    reward_config = reward_config or RewardConfig()
    error = np.sum((_positions(pose) - _positions(goal_pose)) ** 2, axis=-1).mean()
    return float(np.exp(-reward_config.imitation_sharpness * error))


def blend_rewards(w: float, r_imitation: float, r_default: float, r_root: float) -> RewardBreakdown:
    if not 0.0 <= w <= 1.0:
        raise InvalidInputError(f"deviation weight must lie in [0, 1], got {w}")
    return RewardBreakdown(w, r_imitation, r_default, r_root, (1.0 - w) * r_imitation + w * (r_default + r_root))


def combined_reward(pose: PoseLike, goal: PoseLike, rest_pose: PoseLike, y_hat, y_real,
                    reward_config: Optional[RewardConfig] = None, actor_root=None) -> RewardBreakdown:
    """Imitation of the plan, blended toward default + distance keeping as the actor deviates."""
    reward_config = reward_config or RewardConfig()
    w = deviation_weight(y_hat, y_real, reward_config)
    if actor_root is None:
        actor_root = _positions(y_real)[-1, 0]
    return blend_rewards(
        w,
        reward_imitation(pose, goal, reward_config),
        reward_default(pose, rest_pose, reward_config),
        reward_root(_positions(pose)[0], actor_root, reward_config),
    )


def kinematic_tracker_step(current: GlobalPose, goal: GlobalPose, blend_rate: float,
                           actor_root=None, w: float = 0.0,
                           reward_config: Optional[RewardConfig] = None) -> GlobalPose:
    """
    Move the tracked pose a fraction of the way toward the goal.

    When `w` exceeds the safety threshold and the actor root is known, the whole pose is
    pushed away from the actor along the ground until r_root reaches the safety floor.
    """
    reward_config = reward_config or RewardConfig()
    if not 0.0 < blend_rate <= 1.0:
        raise InvalidInputError(f"blend rate must lie in (0, 1], got {blend_rate}")
    positions = current.joint_positions + blend_rate * (goal.joint_positions - current.joint_positions)
    if blend_rate == 1.0:
        positions = goal.joint_positions.copy()
    yaw = float(wrap_angle(current.root_yaw + blend_rate * wrap_angle(goal.root_yaw - current.root_yaw)))

    if actor_root is not None and w > reward_config.safety_threshold:
        minimum = reward_config.safety_floor * reward_config.root_saturation
        offset = positions[0] - np.asarray(actor_root, dtype=np.float64)
        distance = np.linalg.norm(offset)
        if distance < minimum:
            ground = offset * np.array([1.0, 0.0, 1.0])
            ground_norm = np.linalg.norm(ground)
            direction = ground / ground_norm if ground_norm > 1e-9 else np.array([1.0, 0.0, 0.0])
            # horizontal push so the full 3D separation reaches the floor distance
            vertical = offset[1]
            target = np.sqrt(max(minimum ** 2 - vertical ** 2, 0.0))
            positions = positions + direction * (target - ground_norm)
            logger.debug(f"⚠️ Tracker pushed root {target - ground_norm:.3f} m away from the actor")
    return GlobalPose(positions, yaw)
