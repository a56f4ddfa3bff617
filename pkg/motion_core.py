#!/usr/bin/env python3
"""
Motion Core

Raw two-agent motion containers and the reactor-centric interaction
representation built on top of them:
- SMPL-22 skeleton tables (parents, rest pose, contact joint selections)
- foot contact detection and the binary interaction field
- canonicalization of a reactor/actor clip pair into 443-d interaction frames
- recovery of global reactor motion from predicted features
- 6D rotation encoding and feature standardization

Conventions: Y up, ground plane y = 0, yaw 0 faces +Z, the agent's left is +X.
Velocities are per second (backward difference, forward difference at frame 0).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

import config
from errors import DegenerateInputError, InvalidInputError

logger = logging.getLogger(__name__)

JOINT_NAMES = (
    'pelvis', 'left_hip', 'right_hip', 'spine1', 'left_knee', 'right_knee',
    'spine2', 'left_ankle', 'right_ankle', 'spine3', 'left_foot', 'right_foot',
    'neck', 'left_collar', 'right_collar', 'head', 'left_shoulder', 'right_shoulder',
    'left_elbow', 'right_elbow', 'left_wrist', 'right_wrist',
)

PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

# Standing rest pose, meters, facing +Z
REST_POSITIONS = (
    (0.000, 0.930, 0.000),    # pelvis
    (0.060, 0.840, 0.000),    # left_hip
    (-0.060, 0.840, 0.000),   # right_hip
    (0.000, 1.040, -0.010),   # spine1
    (0.100, 0.470, 0.010),    # left_knee
    (-0.100, 0.470, 0.010),   # right_knee
    (0.000, 1.170, -0.010),   # spine2
    (0.110, 0.045, -0.020),   # left_ankle
    (-0.110, 0.045, -0.020),  # right_ankle
    (0.000, 1.220, 0.000),    # spine3
    (0.120, 0.015, 0.100),    # left_foot
    (-0.120, 0.015, 0.100),   # right_foot
    (0.000, 1.440, -0.010),   # neck
    (0.080, 1.360, -0.010),   # left_collar
    (-0.080, 1.360, -0.010),  # right_collar
    (0.000, 1.560, 0.030),    # head
    (0.180, 1.380, -0.020),   # left_shoulder
    (-0.180, 1.380, -0.020),  # right_shoulder
    (0.220, 1.120, -0.030),   # left_elbow
    (-0.220, 1.120, -0.030),  # right_elbow
    (0.240, 0.880, 0.000),    # left_wrist
    (-0.240, 0.880, 0.000),   # right_wrist
)

# Left/right swap used by mirroring
MIRROR_INDEX = (0, 2, 1, 3, 5, 4, 6, 8, 7, 9, 11, 10, 12, 14, 13, 15, 17, 16, 19, 18, 21, 20)

# Feature layout of one 443-d interaction frame
R_SLICE = slice(0, 1)
R_DOT_SLICE = slice(1, 4)
P_SLICE = slice(4, 67)
P_DOT_SLICE = slice(67, 133)
THETA_SLICE = slice(133, 259)
X_CONTACT_SLICE = slice(259, 263)
Y_ROOT_SLICE = slice(263, 266)
Y_YAW_SLICE = slice(266, 268)
Y_ROOT_VEL_SLICE = slice(268, 271)
Y_JOINT_SLICE = slice(271, 337)
Y_JOINT_VEL_SLICE = slice(337, 403)
Y_CONTACT_SLICE = slice(403, 407)
FIELD_SLICE = slice(407, 443)
REACTOR_SLICE = slice(0, config.REACTOR_DIM)
ACTOR_SLICE = slice(config.REACTOR_DIM, config.REACTOR_DIM + config.ACTOR_DIM)


def _mask(*slices):
    mask = np.zeros(config.FRAME_DIM, dtype=bool)
    for s in slices:
        mask[s] = True
    return mask


BINARY_MASK = _mask(X_CONTACT_SLICE, Y_CONTACT_SLICE, FIELD_SLICE)
# Pose sub-features compared by the prefix loss
POSE_MASK = _mask(R_SLICE, P_SLICE, THETA_SLICE, Y_ROOT_SLICE, Y_YAW_SLICE, Y_JOINT_SLICE)


class AgentRole(str, Enum):
    ACTOR = 'actor'
    REACTOR = 'reactor'


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Joint hierarchy plus the joint selections used by contacts, fields and metrics."""

    joint_names: Tuple[str, ...] = JOINT_NAMES
    parent_index: Tuple[int, ...] = PARENTS
    rest_positions: np.ndarray = field(default_factory=lambda: np.array(REST_POSITIONS, dtype=np.float64))
    foot_joint_ids: Tuple[int, ...] = (7, 10, 8, 11)
    contact_field_ids: Tuple[int, ...] = (0, 15, 7, 8, 20, 21)
    cross_distance_ids: Tuple[int, ...] = (0, 4, 5, 10, 11, 16, 17, 15, 20, 21)
    mirror_index: Tuple[int, ...] = MIRROR_INDEX

    def __post_init__(self):
        self.validate()

    @property
    def joint_count(self) -> int:
        return len(self.parent_index)

    @property
    def rest_offsets(self) -> np.ndarray:
        """Per-joint offset from the parent joint in the rest pose (root: absolute position)."""
        offsets = self.rest_positions.copy()
        for j, parent in enumerate(self.parent_index):
            if parent >= 0:
                offsets[j] = self.rest_positions[j] - self.rest_positions[parent]
        return offsets

    def validate(self):
        if self.joint_count != config.JOINT_COUNT:
            raise InvalidInputError(f"skeleton must have {config.JOINT_COUNT} joints, got {self.joint_count}")
        if len(self.joint_names) != self.joint_count:
            raise InvalidInputError("joint_names length does not match parent_index")
        if self.parent_index[0] != -1:
            raise InvalidInputError("joint 0 must be the root")
        for j, parent in enumerate(self.parent_index[1:], start=1):
            if not 0 <= parent < j:
                raise InvalidInputError(f"parent of joint {j} must precede it, got {parent}")
        if np.asarray(self.rest_positions).shape != (self.joint_count, 3):
            raise InvalidInputError("rest_positions must be joint_count x 3")
        for name, ids, size in (('foot_joint_ids', self.foot_joint_ids, 4),
                                ('contact_field_ids', self.contact_field_ids, 6),
                                ('cross_distance_ids', self.cross_distance_ids, 10)):
            if len(ids) != size or len(set(ids)) != size:
                raise InvalidInputError(f"{name} must hold {size} distinct joints")
            if any(not 0 <= j < self.joint_count for j in ids):
                raise InvalidInputError(f"{name} contains an invalid joint index")

    def rest_pose(self, root_xz=(0.0, 0.0), yaw: float = 0.0) -> np.ndarray:
        """Rest pose joint positions placed at a ground location and heading."""
        pose = rotate_y(self.rest_positions, yaw)
        pose[:, 0] += root_xz[0]
        pose[:, 2] += root_xz[1]
        return pose


SMPL22 = Skeleton()


@dataclass
class GlobalPose:
    joint_positions: np.ndarray  # (22, 3)
    root_yaw: float


@dataclass
class MotionClip:
    """Global motion of one agent: joint positions (n, 22, 3) and root yaw (n,)."""

    positions: np.ndarray
    root_yaw: np.ndarray
    fps: float = config.FPS
    agent_id: AgentRole = AgentRole.ACTOR

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.root_yaw = np.asarray(self.root_yaw, dtype=np.float64).reshape(-1)
        self.agent_id = AgentRole(self.agent_id)
        if self.fps <= 0:
            raise InvalidInputError(f"fps must be positive, got {self.fps}")
        if self.positions.ndim != 3 or self.positions.shape[1:] != (config.JOINT_COUNT, 3):
            raise InvalidInputError(f"positions must be (frames, {config.JOINT_COUNT}, 3), got {self.positions.shape}")
        if self.root_yaw.shape[0] != self.positions.shape[0]:
            raise InvalidInputError("root_yaw length does not match positions")
        if not (np.isfinite(self.positions).all() and np.isfinite(self.root_yaw).all()):
            raise InvalidInputError("clip contains non-finite values")

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def from_poses(cls, poses: Sequence[GlobalPose], fps=config.FPS, agent_id=AgentRole.ACTOR):
        positions = np.stack([p.joint_positions for p in poses]) if poses else np.zeros((0, config.JOINT_COUNT, 3))
        return cls(positions, [p.root_yaw for p in poses], fps, agent_id)

    @property
    def frames(self) -> List[GlobalPose]:
        return [self.pose(i) for i in range(len(self))]

    def pose(self, index: int) -> GlobalPose:
        return GlobalPose(self.positions[index].copy(), float(self.root_yaw[index]))

    def slice(self, start: int, stop: int) -> 'MotionClip':
        return MotionClip(self.positions[start:stop], self.root_yaw[start:stop], self.fps, self.agent_id)

    def concat(self, other: 'MotionClip') -> 'MotionClip':
        return MotionClip(np.concatenate([self.positions, other.positions]),
                          np.concatenate([self.root_yaw, other.root_yaw]), self.fps, self.agent_id)


@dataclass
class CanonicalTransform:
    """Maps canonical coordinates to global ones: global = Ry(yaw) @ canonical + translation."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), 0.0)

    @classmethod
    def at_frame(cls, clip: MotionClip, index: int) -> 'CanonicalTransform':
        root = clip.positions[index, 0]
        return cls(np.array([root[0], 0.0, root[2]]), float(clip.root_yaw[index]))

    def to_global(self, points):
        return rotate_y(points, self.yaw) + self.translation

    def to_canonical(self, points):
        return rotate_y(np.asarray(points) - self.translation, -self.yaw)

    def inverse(self) -> 'CanonicalTransform':
        return CanonicalTransform(-rotate_y(self.translation, -self.yaw), -self.yaw)


@dataclass
class ReactorFrame:
    r: float
    r_dot: np.ndarray     # yaw rate, vx, vz
    p: np.ndarray         # (21, 3)
    p_dot: np.ndarray     # (22, 3)
    theta: np.ndarray     # (21, 6)
    f: np.ndarray         # (4,)


@dataclass
class ActorFrame:
    rel_root_offset: np.ndarray
    rel_root_yaw: np.ndarray   # (cos, sin)
    rel_root_linvel: np.ndarray
    rel_joint_pos: np.ndarray  # (22, 3)
    rel_joint_vel: np.ndarray  # (22, 3)
    f: np.ndarray


@dataclass
class InteractionFieldFrame:
    values: np.ndarray  # (6, 6), rows: reactor contact joints

    def flatten(self) -> np.ndarray:
        return self.values.reshape(-1).astype(np.float64)


@dataclass
class InteractionFrame:
    x: ReactorFrame
    y: ActorFrame
    field: InteractionFieldFrame

    @classmethod
    def from_vector(cls, vector) -> 'InteractionFrame':
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (config.FRAME_DIM,):
            raise InvalidInputError(f"interaction frame must have {config.FRAME_DIM} dims, got {v.shape}")
        x = ReactorFrame(float(v[R_SLICE][0]), v[R_DOT_SLICE].copy(), v[P_SLICE].reshape(21, 3),
                         v[P_DOT_SLICE].reshape(22, 3), v[THETA_SLICE].reshape(21, 6), v[X_CONTACT_SLICE].copy())
        y = ActorFrame(v[Y_ROOT_SLICE].copy(), v[Y_YAW_SLICE].copy(), v[Y_ROOT_VEL_SLICE].copy(),
                       v[Y_JOINT_SLICE].reshape(22, 3), v[Y_JOINT_VEL_SLICE].reshape(22, 3), v[Y_CONTACT_SLICE].copy())
        return cls(x, y, InteractionFieldFrame(v[FIELD_SLICE].reshape(6, 6)))

    def to_vector(self) -> np.ndarray:
        x, y = self.x, self.y
        return np.concatenate([
            [x.r], x.r_dot, x.p.reshape(-1), x.p_dot.reshape(-1), x.theta.reshape(-1), x.f,
            y.rel_root_offset, y.rel_root_yaw, y.rel_root_linvel, y.rel_joint_pos.reshape(-1),
            y.rel_joint_vel.reshape(-1), y.f, self.field.flatten(),
        ]).astype(np.float64)


@dataclass
class InteractionWindow:
    """A block of canonical interaction frames with the provenance of its content."""

    frames: np.ndarray                 # (length, 443)
    role: str = 'history'              # history | prediction
    provenance: str = 'dataset'        # dataset | rollout | initial | warmup
    transform: Optional[CanonicalTransform] = None

    def __post_init__(self):
        if self.role not in ('history', 'prediction'):
            raise InvalidInputError(f"unknown window role {self.role!r}")
        if self.frames.ndim != 2 or self.frames.shape[1] != config.FRAME_DIM:
            raise InvalidInputError(f"window frames must be (length, {config.FRAME_DIM})")

    def __len__(self):
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def wrap_angle(angle):
    """Wrap radians into (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped <= -np.pi, wrapped + 2 * np.pi, wrapped)


def rotate_y(points, yaw):
    """Rotate (..., 3) points about +Y; yaw broadcasts against points[..., 0]."""
    points = np.asarray(points, dtype=np.float64)
    c, s = np.cos(yaw), np.sin(yaw)
    out = points.copy()
    out[..., 0] = c * points[..., 0] + s * points[..., 2]
    out[..., 2] = -s * points[..., 0] + c * points[..., 2]
    return out


def yaw_matrix(yaw) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    zero, one = np.zeros_like(c), np.ones_like(c)
    return np.stack([np.stack([c, zero, s], -1),
                     np.stack([zero, one, zero], -1),
                     np.stack([-s, zero, c], -1)], -2)


def finite_difference(values, fps):
    """Per-second time derivative along axis 0: backward difference, forward at frame 0."""
    values = np.asarray(values, dtype=np.float64)
    velocity = np.zeros_like(values)
    if values.shape[0] > 1:
        velocity[1:] = (values[1:] - values[:-1]) * fps
        velocity[0] = velocity[1]
    return velocity


def yaw_rate(yaw, fps):
    yaw = np.asarray(yaw, dtype=np.float64)
    rate = np.zeros_like(yaw)
    if yaw.shape[0] > 1:
        rate[1:] = wrap_angle(np.diff(yaw)) * fps
        rate[0] = rate[1]
    return rate


def rotation_between(a, b) -> np.ndarray:
    """Minimal rotation matrices taking directions a to directions b, (..., 3) -> (..., 3, 3)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a, b = np.broadcast_arrays(a, b)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    # zero-length bones keep the rest direction
    a = a / np.where(na < 1e-12, 1.0, na)
    b = np.where(nb < 1e-12, a, b / np.where(nb < 1e-12, 1.0, nb))

    v = np.cross(a, b)
    c = np.sum(a * b, axis=-1)
    eye = np.broadcast_to(np.eye(3), a.shape[:-1] + (3, 3))
    skew = np.zeros(a.shape[:-1] + (3, 3))
    skew[..., 0, 1], skew[..., 0, 2] = -v[..., 2], v[..., 1]
    skew[..., 1, 0], skew[..., 1, 2] = v[..., 2], -v[..., 0]
    skew[..., 2, 0], skew[..., 2, 1] = -v[..., 1], v[..., 0]
    opposite = c < -1.0 + 1e-9
    denom = np.where(opposite, 1.0, 1.0 + c)[..., None, None]
    rot = eye + skew + (skew @ skew) / denom

    if np.any(opposite):
        # half turn about any axis orthogonal to a
        helper = np.where(np.abs(a[..., :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
        axis = np.cross(a, helper)
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        half_turn = 2.0 * axis[..., :, None] * axis[..., None, :] - eye
        rot = np.where(opposite[..., None, None], half_turn, rot)
    return rot


def rot_to_6d(rotation) -> np.ndarray:
    """First two columns of a rotation matrix, (..., 3, 3) -> (..., 6)."""
    rotation = np.asarray(rotation, dtype=np.float64)
    if not np.isfinite(rotation).all():
        raise InvalidInputError("rotation contains non-finite values")
    return np.concatenate([rotation[..., :, 0], rotation[..., :, 1]], axis=-1)


def six_d_to_rot(six_d, eps: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt decode of (..., 6) into proper rotation matrices (..., 3, 3)."""
    six_d = np.asarray(six_d, dtype=np.float64)
    if not np.isfinite(six_d).all():
        raise InvalidInputError("6D input contains non-finite values")
    a1, a2 = six_d[..., :3], six_d[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < eps):
        raise DegenerateInputError("first 6D column has zero length")
    b1 = a1 / n1
    u = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(nu < eps * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise DegenerateInputError("6D columns are (near-)parallel")
    b2 = u / nu
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def forward_kinematics(skeleton: Skeleton, local_rotations, root_positions, root_yaw) -> np.ndarray:
    """Global joint positions from per-joint local rotations (n, 22, 3, 3) and root trajectory."""
    local_rotations = np.asarray(local_rotations, dtype=np.float64)
    n = local_rotations.shape[0]
    offsets = skeleton.rest_offsets
    global_rot = np.zeros((n, skeleton.joint_count, 3, 3))
    positions = np.zeros((n, skeleton.joint_count, 3))
    global_rot[:, 0] = yaw_matrix(np.asarray(root_yaw, dtype=np.float64)) @ local_rotations[:, 0]
    positions[:, 0] = root_positions
    for j in range(1, skeleton.joint_count):
        parent = skeleton.parent_index[j]
        positions[:, j] = positions[:, parent] + np.einsum('nij,j->ni', global_rot[:, parent], offsets[j])
        global_rot[:, j] = global_rot[:, parent] @ local_rotations[:, j]
    return positions


# ---------------------------------------------------------------------------
# Contacts and interaction field
# ---------------------------------------------------------------------------

def detect_foot_contacts(clip: MotionClip, skeleton: Skeleton = SMPL22,
                         height_thresh: float = config.FOOT_HEIGHT_THRESHOLD,
                         speed_thresh: float = config.FOOT_SPEED_THRESHOLD) -> np.ndarray:
    """Per-frame binary contact labels (n, 4) for the skeleton's foot joints."""
    if len(clip) == 0:
        raise InvalidInputError("cannot detect contacts on an empty clip")
    if height_thresh <= 0 or speed_thresh <= 0:
        raise InvalidInputError("contact thresholds must be positive")
    feet = clip.positions[:, list(skeleton.foot_joint_ids)]
    velocity = finite_difference(feet, clip.fps)
    speed = np.linalg.norm(velocity[..., [0, 2]], axis=-1)
    return ((feet[..., 1] < height_thresh) & (speed < speed_thresh)).astype(np.float64)


def interaction_fields(positions_x, positions_y, skeleton: Skeleton = SMPL22,
                       thresh: float = config.FIELD_THRESHOLD) -> np.ndarray:
    """Flattened 6x6 contact fields for every frame, (n, 22, 3) x2 -> (n, 36)."""
    ids = list(skeleton.contact_field_ids)
    a = np.asarray(positions_x)[:, ids]
    b = np.asarray(positions_y)[:, ids]
    distance = np.linalg.norm(a[:, :, None, :] - b[:, None, :, :], axis=-1)
    return (distance <= thresh).astype(np.float64).reshape(len(a), -1)


def compute_interaction_field(pose_x: GlobalPose, pose_y: GlobalPose, skeleton: Skeleton = SMPL22,
                              thresh: float = config.FIELD_THRESHOLD) -> InteractionFieldFrame:
    if thresh <= 0:
        raise InvalidInputError("field threshold must be positive")
    values = interaction_fields(pose_x.joint_positions[None], pose_y.joint_positions[None], skeleton, thresh)
    return InteractionFieldFrame(values.reshape(6, 6))


# ---------------------------------------------------------------------------
# Canonicalization / recovery
# ---------------------------------------------------------------------------

def _bone_rotations_6d(local_positions, skeleton: Skeleton) -> np.ndarray:
    n = local_positions.shape[0]
    parents = np.array(skeleton.parent_index[1:])
    bones = local_positions[:, 1:] - local_positions[:, parents]
    rest_bones = skeleton.rest_positions[1:] - skeleton.rest_positions[parents]
    return rot_to_6d(rotation_between(rest_bones[None], bones)).reshape(n, -1)


def _reactor_features(clip: MotionClip, contacts, skeleton: Skeleton) -> np.ndarray:
    n = len(clip)
    positions, yaw, fps = clip.positions, clip.root_yaw, clip.fps
    root = positions[:, 0]
    origin = root * np.array([1.0, 0.0, 1.0])
    local = rotate_y(positions - origin[:, None], -yaw[:, None])
    root_velocity = rotate_y(finite_difference(root, fps), -yaw)
    joint_velocity = rotate_y(finite_difference(positions, fps), -yaw[:, None])
    return np.concatenate([
        root[:, 1:2],
        yaw_rate(yaw, fps)[:, None],
        root_velocity[:, [0, 2]],
        local[:, 1:].reshape(n, -1),
        joint_velocity.reshape(n, -1),
        _bone_rotations_6d(local, skeleton),
        contacts,
    ], axis=1)


def _actor_features(reactor: MotionClip, actor: MotionClip, contacts) -> np.ndarray:
    n = len(reactor)
    yaw_x, fps = reactor.root_yaw, reactor.fps
    root_x, root_y = reactor.positions[:, 0], actor.positions[:, 0]
    origin = root_x * np.array([1.0, 0.0, 1.0])
    relative_yaw = wrap_angle(actor.root_yaw - yaw_x)
    return np.concatenate([
        rotate_y(root_y - root_x, -yaw_x),
        np.cos(relative_yaw)[:, None],
        np.sin(relative_yaw)[:, None],
        rotate_y(finite_difference(root_y, fps), -yaw_x),
        rotate_y(actor.positions - origin[:, None], -yaw_x[:, None]).reshape(n, -1),
        rotate_y(finite_difference(actor.positions, fps), -yaw_x[:, None]).reshape(n, -1),
        contacts,
    ], axis=1)


def canonicalize(reactor: MotionClip, actor: MotionClip, anchor_frame: int = 0,
                 contacts_x=None, contacts_y=None,
                 field_thresh: float = config.FIELD_THRESHOLD,
                 skeleton: Skeleton = SMPL22) -> Tuple[np.ndarray, CanonicalTransform]:
    """
    Encode a reactor/actor clip pair as (n, 443) interaction frames.

    Every feature is expressed in the reactor's heading frame of its own frame, so the
    result is unchanged by any rigid yaw + translation applied to both agents. The
    returned transform maps the canonical frame anchored at `anchor_frame` to global.
    """
    if len(reactor) != len(actor):
        raise InvalidInputError(f"clip lengths differ: reactor {len(reactor)}, actor {len(actor)}")
    if len(reactor) == 0:
        raise InvalidInputError("cannot canonicalize empty clips")
    if reactor.fps != actor.fps:
        raise InvalidInputError(f"clip frame rates differ: {reactor.fps} vs {actor.fps}")
    if not 0 <= anchor_frame < len(reactor):
        raise InvalidInputError(f"anchor frame {anchor_frame} outside clip of {len(reactor)} frames")

    if contacts_x is None:
        contacts_x = detect_foot_contacts(reactor, skeleton)
    if contacts_y is None:
        contacts_y = detect_foot_contacts(actor, skeleton)
    contacts_x = np.asarray(contacts_x, dtype=np.float64)
    contacts_y = np.asarray(contacts_y, dtype=np.float64)
    if contacts_x.shape != (len(reactor), 4) or contacts_y.shape != (len(actor), 4):
        raise InvalidInputError("contact labels must be (frames, 4)")

    features = np.concatenate([
        _reactor_features(reactor, contacts_x, skeleton),
        _actor_features(reactor, actor, contacts_y),
        interaction_fields(reactor.positions, actor.positions, skeleton, field_thresh),
    ], axis=1)
    assert features.shape[1] == config.FRAME_DIM
    return features, CanonicalTransform.at_frame(reactor, anchor_frame)


def _integrate_root(features, fps, anchor_frame):
    """Canonical root yaw and XZ trajectory integrated from yaw rates and local velocities."""
    n = features.shape[0]
    yaw = np.zeros(n)
    yaw[1:] = np.cumsum(features[1:, 1] / fps)
    yaw -= yaw[anchor_frame]
    velocity = np.zeros((n, 3))
    velocity[:, 0], velocity[:, 2] = features[:, 2], features[:, 3]
    step = rotate_y(velocity, yaw) / fps
    root = np.zeros((n, 3))
    root[1:] = np.cumsum(step[1:], axis=0)
    root -= root[anchor_frame]
    return yaw, root


def recover(frames, transform: CanonicalTransform, fps: float = config.FPS,
            anchor_frame: int = 0, agent_id=AgentRole.REACTOR) -> MotionClip:
    """Global reactor motion from reactor features (n, >=263); frame `anchor_frame` sits at the transform origin."""
    features = np.asarray(frames, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0 or features.shape[1] < config.REACTOR_DIM:
        raise InvalidInputError(f"recover expects (frames, >= {config.REACTOR_DIM}) features, got {features.shape}")
    n = features.shape[0]
    yaw, root = _integrate_root(features, fps, anchor_frame)
    local = np.zeros((n, config.JOINT_COUNT, 3))
    local[:, 0, 1] = features[:, 0]
    local[:, 1:] = features[:, P_SLICE].reshape(n, 21, 3)
    canonical = rotate_y(local, yaw[:, None]) + root[:, None]
    return MotionClip(transform.to_global(canonical), wrap_angle(yaw + transform.yaw), fps, agent_id)


def canonical_history(reactor: MotionClip, actor: MotionClip, history: int = config.HISTORY_FRAMES,
                      skeleton: Skeleton = SMPL22) -> np.ndarray:
    """
    Features of the last `history` frames of a global clip pair.

    One extra leading frame is encoded when available and then dropped, so the first
    history frame gets a backward-difference velocity like every other frame.
    """
    if len(reactor) < history or len(actor) < history:
        raise InvalidInputError(f"need at least {history} frames of both agents")
    take = min(history + 1, len(reactor), len(actor))
    reactor = reactor.slice(len(reactor) - take, len(reactor))
    actor = actor.slice(len(actor) - take, len(actor))
    features, _ = canonicalize(reactor, actor, anchor_frame=take - history, skeleton=skeleton)
    return features[take - history:]


def decode_actor_positions(frames, reactor: MotionClip) -> np.ndarray:
    """Global actor joint positions (n, 22, 3) from actor features and the matching reactor clip."""
    features = np.asarray(frames, dtype=np.float64)
    n = features.shape[0]
    if len(reactor) != n:
        raise InvalidInputError("actor features and reactor clip lengths differ")
    local = features[:, Y_JOINT_SLICE].reshape(n, 22, 3)
    origin = reactor.positions[:, 0] * np.array([1.0, 0.0, 1.0])
    return rotate_y(local, reactor.root_yaw[:, None]) + origin[:, None]


# ---------------------------------------------------------------------------
# Feature standardization
# ---------------------------------------------------------------------------

@dataclass
class NormalizationStats:
    """Per-dimension mean/std of interaction frames; binary dims are pinned to (0, 1)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).copy()
        self.std = np.asarray(self.std, dtype=np.float64).copy()
        if self.mean.shape != (config.FRAME_DIM,) or self.std.shape != (config.FRAME_DIM,):
            raise InvalidInputError(f"stats must have dimension {config.FRAME_DIM}, got {self.mean.shape}")
        self.std = np.maximum(self.std, config.STD_FLOOR)
        self.mean[BINARY_MASK] = 0.0
        self.std[BINARY_MASK] = 1.0

    @classmethod
    def from_features(cls, features) -> 'NormalizationStats':
        features = np.asarray(features, dtype=np.float64).reshape(-1, config.FRAME_DIM)
        return cls(features.mean(axis=0), features.std(axis=0))

    @classmethod
    def identity(cls) -> 'NormalizationStats':
        return cls(np.zeros(config.FRAME_DIM), np.ones(config.FRAME_DIM))


def _check_dims(frames, stats: NormalizationStats):
    if frames.shape[-1] != stats.mean.shape[0]:
        raise InvalidInputError(f"frames have {frames.shape[-1]} dims, stats have {stats.mean.shape[0]}")


def normalize_features(frames, stats: NormalizationStats, limit: Optional[float] = None):
    """Z-score continuous dims; works on numpy arrays and torch tensors. `limit` clips the z-scores."""
    _check_dims(frames, stats)
    mean, std = _like(frames, stats.mean), _like(frames, stats.std)
    normalized = (frames - mean) / std
    if limit is None:
        return normalized
    if isinstance(normalized, np.ndarray):
        return np.clip(normalized, -limit, limit)
    return normalized.clamp(-limit, limit)


def denormalize_features(frames, stats: NormalizationStats):
    _check_dims(frames, stats)
    mean, std = _like(frames, stats.mean), _like(frames, stats.std)
    return frames * std + mean


def _like(reference, array):
    if isinstance(reference, np.ndarray):
        return array
    import torch
    return torch.as_tensor(array, dtype=reference.dtype, device=reference.device)
