"""Rigid 52-joint kinematic body standing in for SMPL-H.

Body frames are z-up with +y as the facing direction and +x to the body's
right.  The CPF (central pupil frame) is x-left, y-up, z-forward and is rigidly
attached to the head joint.

Shape is two multiplicative bone scales: ``beta[0]`` scales every bone and the
CPF offset, ``beta[1]`` additionally scales arm and hand bones.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import PoseSE3, Rotation3

NUM_JOINTS = 52
NUM_LOCAL = 51
NUM_BODY_JOINTS = 22  # root + 21
SHAPE_DIM = 2
SHAPE_RANGE = (0.5, 2.0)

_FINGERS = ("index", "middle", "pinky", "ring", "thumb")


def _build_tables():
    names = [
        "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
        "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
        "neck", "left_collar", "right_collar", "head", "left_shoulder",
        "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    ]
    parents = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19]
    offsets = [
        (0.0, 0.0, 0.0),
        (-0.09, 0.0, -0.08), (0.09, 0.0, -0.08), (0.0, -0.01, 0.10),
        (0.0, 0.0, -0.40), (0.0, 0.0, -0.40), (0.0, 0.0, 0.13),
        (0.0, 0.0, -0.40), (0.0, 0.0, -0.40), (0.0, 0.01, 0.05),
        (0.0, 0.13, -0.06), (0.0, 0.13, -0.06), (0.0, 0.0, 0.22),
        (-0.07, 0.0, 0.15), (0.07, 0.0, 0.15), (0.0, 0.01, 0.10),
        (-0.12, 0.0, 0.0), (0.12, 0.0, 0.0), (-0.28, 0.0, 0.0),
        (0.28, 0.0, 0.0), (-0.25, 0.0, 0.0), (0.25, 0.0, 0.0),
    ]
    # (base offset from wrist, then two distal segment lengths); x is mirrored per side.
    finger_geom = {
        "index": ((0.090, 0.025, 0.0), 0.035, 0.025),
        "middle": ((0.095, 0.005, 0.0), 0.040, 0.028),
        "pinky": ((0.080, -0.035, 0.0), 0.025, 0.020),
        "ring": ((0.090, -0.015, 0.0), 0.035, 0.025),
        "thumb": ((0.025, 0.035, -0.010), 0.030, 0.025),
    }
    for side, wrist, sign in (("left", 20, -1.0), ("right", 21, 1.0)):
        for finger in _FINGERS:
            base, l2, l3 = finger_geom[finger]
            first = len(names)
            names += [f"{side}_{finger}{k}" for k in (1, 2, 3)]
            parents += [wrist, first, first + 1]
            offsets += [(sign * base[0], base[1], base[2]), (sign * l2, 0.0, 0.0), (sign * l3, 0.0, 0.0)]
    return names, np.array(parents), np.array(offsets, dtype=np.float64)


@dataclass(frozen=True)
class SkeletonTopology:
    names: tuple
    parent_index: np.ndarray
    rest_offset: np.ndarray
    cpf_offset: np.ndarray
    head_joint_index: int = 15
    foot_joint_indices: tuple = (10, 11)
    wrist_joint_indices: tuple = (20, 21)
    head_top_offset: float = 0.16
    # Joints whose incoming bone is additionally scaled by the arm coefficient.
    arm_joints: tuple = field(default=tuple(range(16, 22)) + tuple(range(22, 52)))

    def __post_init__(self):
        if len(self.parent_index) != NUM_JOINTS or self.rest_offset.shape != (NUM_JOINTS, 3):
            raise ValueError("skeleton must have 52 joints")
        if self.parent_index[0] != -1 or np.any(self.parent_index[1:] >= np.arange(1, NUM_JOINTS)):
            raise ValueError("parents must precede children with the pelvis as root")

    @property
    def joint_count(self) -> int:
        return NUM_JOINTS

    def hand_joint_indices(self, side: str) -> np.ndarray:
        """Wrist followed by the 15 finger joints of one hand."""
        wrist = self.wrist_joint_indices[0 if side == "left" else 1]
        start = 22 if side == "left" else 37
        return np.concatenate([[wrist], np.arange(start, start + 15)])

    def bone_scale(self, beta: np.ndarray) -> np.ndarray:
        """Per-joint multiplier on rest offsets, shape (..., 52)."""
        beta = np.asarray(beta, dtype=np.float64)
        scale = np.repeat(beta[..., :1], NUM_JOINTS, axis=-1)
        arm = np.zeros(NUM_JOINTS, dtype=bool)
        arm[list(self.arm_joints)] = True
        return np.where(arm, scale * beta[..., 1:2], scale)

    def subtree_mask(self) -> np.ndarray:
        """``mask[i, k]`` is True when joint k is i or a descendant of i."""
        mask = np.eye(NUM_JOINTS, dtype=bool)
        for k in range(1, NUM_JOINTS):
            mask[:, k] |= mask[:, self.parent_index[k]]
        return mask

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.parent_index, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.rest_offset, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.cpf_offset, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


_names, _parents, _offsets = _build_tables()
DEFAULT_SKELETON = SkeletonTopology(
    names=tuple(_names),
    parent_index=_parents,
    rest_offset=_offsets,
    cpf_offset=np.array([0.0, 0.10, 0.07]),
)

# CPF axes expressed in the head-joint frame: x left, y up, z forward.
R_HEAD_CPF = np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class ShapeParams:
    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64).reshape(SHAPE_DIM).copy()
        lo, hi = SHAPE_RANGE
        if np.any(b < lo) or np.any(b > hi):
            raise ValueError(f"shape coefficients must lie in [{lo}, {hi}], got {b}")
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)

    @classmethod
    def neutral(cls) -> "ShapeParams":
        return cls(np.ones(SHAPE_DIM))


@dataclass(frozen=True)
class LocalPose:
    joint_rotations: np.ndarray  # (51, 3, 3)

    def __post_init__(self):
        r = np.asarray(self.joint_rotations, dtype=np.float64)
        if r.shape != (NUM_LOCAL, 3, 3):
            raise ValueError(f"expected (51, 3, 3) rotations, got {r.shape}")
        object.__setattr__(self, "joint_rotations", r)

    @classmethod
    def identity(cls) -> "LocalPose":
        return cls(np.broadcast_to(np.eye(3), (NUM_LOCAL, 3, 3)).copy())


@dataclass(frozen=True)
class BodyFrame:
    root: PoseSE3
    joint_rotations: np.ndarray  # (52, 3, 3) world
    joint_positions: np.ndarray  # (52, 3) world
    shape: ShapeParams

    @property
    def joints_world(self) -> list[PoseSE3]:
        return [PoseSE3(Rotation3(r), p) for r, p in zip(self.joint_rotations, self.joint_positions)]


# --- array-level kinematics ---------------------------------------------------


def fk_arrays(root_rot, root_pos, local_rot, beta, skeleton: SkeletonTopology = DEFAULT_SKELETON):
    """Forward kinematics over arbitrary leading batch dims.

    root_rot (..., 3, 3), root_pos (..., 3), local_rot (..., 51, 3, 3),
    beta (..., 2).  Returns world rotations (..., 52, 3, 3) and positions
    (..., 52, 3).
    """
    local_rot = np.asarray(local_rot, dtype=np.float64)
    batch = local_rot.shape[:-3]
    root_rot = np.broadcast_to(root_rot, batch + (3, 3))
    root_pos = np.broadcast_to(root_pos, batch + (3,))
    offsets = skeleton.rest_offset * skeleton.bone_scale(np.broadcast_to(beta, batch + (SHAPE_DIM,)))[..., None]
    rots = np.empty(batch + (NUM_JOINTS, 3, 3))
    pos = np.empty(batch + (NUM_JOINTS, 3))
    rots[..., 0, :, :] = root_rot
    pos[..., 0, :] = root_pos
    parents = skeleton.parent_index
    for k in range(1, NUM_JOINTS):
        pr = rots[..., parents[k], :, :]
        pos[..., k, :] = np.einsum("...ij,...j->...i", pr, offsets[..., k, :]) + pos[..., parents[k], :]
        rots[..., k, :, :] = pr @ local_rot[..., k - 1, :, :]
    return rots, pos


def cpf_from_joints(joint_rot, joint_pos, beta, skeleton: SkeletonTopology = DEFAULT_SKELETON):
    """CPF world pose from world joint arrays (head joint pose composed with the CPF offset)."""
    h = skeleton.head_joint_index
    head_r = joint_rot[..., h, :, :]
    off = skeleton.cpf_offset * np.asarray(beta, dtype=np.float64)[..., :1]
    pos = np.einsum("...ij,...j->...i", head_r, off) + joint_pos[..., h, :]
    return head_r @ R_HEAD_CPF, pos


def root_cpf_arrays(local_rot, beta, skeleton: SkeletonTopology = DEFAULT_SKELETON):
    """T_root,cpf for each (local_rot, beta): CPF pose with the root at identity."""
    local_rot = np.asarray(local_rot, dtype=np.float64)
    batch = local_rot.shape[:-3]
    jr, jp = fk_arrays(np.broadcast_to(np.eye(3), batch + (3, 3)), np.zeros(batch + (3,)), local_rot, beta, skeleton)
    return cpf_from_joints(jr, jp, np.broadcast_to(beta, batch + (SHAPE_DIM,)), skeleton)


def root_from_cpf_arrays(local_rot, beta, cpf_rot, cpf_pos, skeleton: SkeletonTopology = DEFAULT_SKELETON):
    """T_world,root = T_world,cpf · (T_root,cpf)^-1, batched."""
    r_rc, p_rc = root_cpf_arrays(local_rot, beta, skeleton)
    r_cr, p_cr = geo.inverse_arrays(r_rc, p_rc)
    return geo.compose_arrays(cpf_rot, cpf_pos, r_cr, p_cr)


def globalize_arrays(local_rot, beta, cpf_rot, cpf_pos, skeleton: SkeletonTopology = DEFAULT_SKELETON):
    """Place local bodies at given CPF poses. Returns (root_rot, root_pos, joint_rot, joint_pos)."""
    local_rot = np.asarray(local_rot, dtype=np.float64)
    cpf_rot = np.asarray(cpf_rot, dtype=np.float64)
    if local_rot.shape[:-3] != cpf_rot.shape[:-2]:
        raise ValueError(f"length mismatch: {local_rot.shape[:-3]} poses vs {cpf_rot.shape[:-2]} CPF frames")
    root_r, root_p = root_from_cpf_arrays(local_rot, beta, cpf_rot, cpf_pos, skeleton)
    jr, jp = fk_arrays(root_r, root_p, local_rot, beta, skeleton)
    return root_r, root_p, jr, jp


def standing_root(beta, skeleton: SkeletonTopology = DEFAULT_SKELETON) -> PoseSE3:
    """Root pose putting the neutral (identity-rotation) body on the floor at the origin."""
    beta = np.asarray(beta, dtype=np.float64)
    _, jp = fk_arrays(np.eye(3), np.zeros(3), np.broadcast_to(np.eye(3), (NUM_LOCAL, 3, 3)), beta, skeleton)
    lowest = jp[list(skeleton.foot_joint_indices), 2].min()
    return PoseSE3(Rotation3.identity(), np.array([0.0, 0.0, -lowest]))


# --- typed API ----------------------------------------------------------------


def forward_kinematics(root: PoseSE3, pose: LocalPose, shape: ShapeParams,
                       skeleton: SkeletonTopology = DEFAULT_SKELETON) -> BodyFrame:
    jr, jp = fk_arrays(root.rotation.matrix, root.position, pose.joint_rotations, shape.beta, skeleton)
    return BodyFrame(root=root, joint_rotations=jr, joint_positions=jp, shape=shape)


def cpf_pose(frame: BodyFrame, skeleton: SkeletonTopology = DEFAULT_SKELETON) -> PoseSE3:
    r, p = cpf_from_joints(frame.joint_rotations, frame.joint_positions, frame.shape.beta, skeleton)
    return PoseSE3(Rotation3(r), p)


def root_from_cpf(pose: LocalPose, shape: ShapeParams, world_cpf: PoseSE3,
                  skeleton: SkeletonTopology = DEFAULT_SKELETON) -> PoseSE3:
    r, p = root_from_cpf_arrays(pose.joint_rotations, shape.beta, world_cpf.rotation.matrix, world_cpf.position, skeleton)
    return PoseSE3(Rotation3(r), p)


def globalize(states, cpf_traj, skeleton: SkeletonTopology = DEFAULT_SKELETON) -> list[BodyFrame]:
    """Per-timestep ``root_from_cpf`` followed by FK.

    ``states`` is a sequence of objects exposing ``local_rotations()`` and
    ``beta`` (MotionState does).
    """
    states = list(states)
    cpf_traj = list(cpf_traj)
    if len(states) != len(cpf_traj):
        raise ValueError(f"length mismatch: {len(states)} states vs {len(cpf_traj)} CPF poses")
    frames = []
    for s, cpf in zip(states, cpf_traj):
        shape = ShapeParams(np.clip(s.beta, *SHAPE_RANGE))
        lp = LocalPose(s.local_rotations())
        root = root_from_cpf(lp, shape, cpf, skeleton)
        frames.append(forward_kinematics(root, lp, shape, skeleton))
    return frames


def dump_skeleton(skeleton: SkeletonTopology = DEFAULT_SKELETON) -> str:
    """Text table: index, name, parent, rest offset (meters, parent frame)."""
    lines = [
        "# egokit skeleton v1",
        f"# digest {skeleton.digest()}",
        f"# head_joint {skeleton.head_joint_index}",
        f"# cpf_offset {' '.join(f'{v:.6f}' for v in skeleton.cpf_offset)}",
        "# index name parent offset_x offset_y offset_z",
    ]
    for i, (name, parent, off) in enumerate(zip(skeleton.names, skeleton.parent_index, skeleton.rest_offset)):
        lines.append(f"{i} {name} {parent} {off[0]:.6f} {off[1]:.6f} {off[2]:.6f}")
    return "\n".join(lines) + "\n"
