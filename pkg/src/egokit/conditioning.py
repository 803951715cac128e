"""Head-motion conditioning: maps a CPF trajectory to per-timestep features.

Five parameterizations are provided.  ``EGOALLO`` pairs the local relative
CPF motion with the CPF pose relative to a per-timestep, floor-projected
canonical frame, which makes it invariant to floor-plane motions of the world
frame and to where a window starts.  The others are baselines with known
invariance failures.  Every SE(3) quantity is serialized as Rot6D + position.
"""

from __future__ import annotations

import enum

import numpy as np

from . import geometry as geo
from .geometry import PoseSE3, Rotation3

GAZE_EPS = 1e-6


class ConditioningVariant(str, enum.Enum):
    EGOALLO = "egoallo"
    ABSOLUTE_LOCAL_RELATIVE = "abs-local-rel"
    ABSOLUTE_GLOBAL_DELTAS = "abs-global-deltas"
    SEQUENCE_CANONICALIZATION = "seq-canonical"
    ABSOLUTE = "absolute"

    @classmethod
    def parse(cls, value) -> "ConditioningVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown conditioning variant {value!r} (choose from {names})") from None


FEATURE_DIM = {
    ConditioningVariant.EGOALLO: 18,
    ConditioningVariant.ABSOLUTE_LOCAL_RELATIVE: 18,
    ConditioningVariant.ABSOLUTE_GLOBAL_DELTAS: 18,
    ConditioningVariant.SEQUENCE_CANONICALIZATION: 9,
    ConditioningVariant.ABSOLUTE: 9,
}


def _heading_angles(cpf_rot: np.ndarray) -> np.ndarray:
    """Canonical z-rotation angle per timestep, with the degenerate-gaze fallbacks."""
    v = cpf_rot[:, :, 2]
    norm = np.hypot(v[:, 0], v[:, 1])
    angles = -np.arctan2(v[:, 0], v[:, 1])
    for t in np.nonzero(norm < GAZE_EPS)[0]:
        if t > 0:
            angles[t] = angles[t - 1]
            continue
        up = cpf_rot[0, :, 1]
        angles[t] = -np.arctan2(up[0], up[1]) if np.hypot(up[0], up[1]) >= GAZE_EPS else 0.0
    return angles


def canonical_frames(cpf_rot: np.ndarray, cpf_pos: np.ndarray):
    """Floor-projected canonical frames for a (T, 3, 3), (T, 3) CPF trajectory."""
    cpf_rot = np.asarray(cpf_rot, dtype=np.float64)
    pos = np.asarray(cpf_pos, dtype=np.float64).copy()
    pos[:, 2] = 0.0
    return geo.rz_matrix(_heading_angles(cpf_rot)), pos


def canonical_frame(world_cpf: PoseSE3) -> PoseSE3:
    r, p = canonical_frames(world_cpf.rotation.matrix[None], world_cpf.position[None])
    return PoseSE3(Rotation3(r[0]), p[0])


def relative_motion(cpf_rot: np.ndarray, cpf_pos: np.ndarray):
    """(T^{t-1})^{-1} T^t per timestep; identity at t = 0."""
    rel_r = np.broadcast_to(np.eye(3), cpf_rot.shape).copy()
    rel_p = np.zeros_like(cpf_pos)
    if len(cpf_rot) > 1:
        inv_r, inv_p = geo.inverse_arrays(cpf_rot[:-1], cpf_pos[:-1])
        rel_r[1:], rel_p[1:] = geo.compose_arrays(inv_r, inv_p, cpf_rot[1:], cpf_pos[1:])
    return rel_r, rel_p


def encode_arrays(variant, cpf_rot: np.ndarray, cpf_pos: np.ndarray) -> np.ndarray:
    """Conditioning features, shape (T, F)."""
    variant = ConditioningVariant.parse(variant)
    cpf_rot = np.asarray(cpf_rot, dtype=np.float64)
    cpf_pos = np.asarray(cpf_pos, dtype=np.float64)
    if cpf_rot.ndim != 3 or len(cpf_rot) == 0:
        raise ValueError("conditioning needs a non-empty CPF trajectory")

    absolute = geo.pose_to_vec9(cpf_rot, cpf_pos)
    if variant is ConditioningVariant.ABSOLUTE:
        return absolute

    if variant is ConditioningVariant.SEQUENCE_CANONICALIZATION:
        can_r, can_p = canonical_frames(cpf_rot[:1], cpf_pos[:1])
        inv_r, inv_p = geo.inverse_arrays(can_r[0], can_p[0])
        r, p = geo.compose_arrays(inv_r, inv_p, cpf_rot, cpf_pos)
        return geo.pose_to_vec9(r, p)

    rel_r, rel_p = relative_motion(cpf_rot, cpf_pos)
    if variant is ConditioningVariant.ABSOLUTE_LOCAL_RELATIVE:
        return np.concatenate([absolute, geo.pose_to_vec9(rel_r, rel_p)], axis=-1)

    if variant is ConditioningVariant.ABSOLUTE_GLOBAL_DELTAS:
        delta = np.zeros_like(cpf_pos)
        delta[1:] = cpf_pos[1:] - cpf_pos[:-1]
        return np.concatenate([absolute, geo.matrix_to_rot6d(rel_r), delta], axis=-1)

    can_r, can_p = canonical_frames(cpf_rot, cpf_pos)
    inv_r, inv_p = geo.inverse_arrays(can_r, can_p)
    loc_r, loc_p = geo.compose_arrays(inv_r, inv_p, cpf_rot, cpf_pos)
    return np.concatenate([geo.pose_to_vec9(rel_r, rel_p), geo.pose_to_vec9(loc_r, loc_p)], axis=-1)


def encode(variant, traj) -> np.ndarray:
    """Encode a sequence of PoseSE3 CPF poses; returns a (T, F) array of ConditionVectors."""
    traj = list(traj)
    if not traj:
        raise ValueError("conditioning needs a non-empty CPF trajectory")
    rot, pos = geo.poses_to_arrays(traj)
    return encode_arrays(variant, rot, pos)
