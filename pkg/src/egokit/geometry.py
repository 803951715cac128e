"""Rotation and rigid-transform primitives.

Conventions: ``T_a_b`` maps points expressed in frame ``b`` into frame ``a``,
``p_a = R_a_b @ p_b + t_a_b``.  All arrays are float64.  Functions accept
leading batch dimensions wherever that is cheap to support, which lets the
body and guidance code run over whole sequences without Python loops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateRotationError(ValueError):
    """Raised when a 6D rotation encoding has (near) parallel or zero columns."""


@dataclass(frozen=True)
class Rotation3:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation3":
        return cls(np.eye(3))

    def __matmul__(self, other):
        if isinstance(other, Rotation3):
            return Rotation3(self.matrix @ other.matrix)
        return self.matrix @ np.asarray(other, dtype=np.float64)

    def inverse(self) -> "Rotation3":
        return Rotation3(self.matrix.T)

    def is_valid(self, tol: float = 1e-9) -> bool:
        return is_rotation(self.matrix, tol)


@dataclass(frozen=True)
class PoseSE3:
    rotation: Rotation3
    position: np.ndarray

    def __post_init__(self):
        if not isinstance(self.rotation, Rotation3):
            object.__setattr__(self, "rotation", Rotation3(self.rotation))
        p = np.asarray(self.position, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(p)):
            raise ValueError("pose position must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "position", p)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(Rotation3.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(Rotation3(m[:3, :3]), m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.matrix
        out[:3, 3] = self.position
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.matrix.T + self.position

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    ra = a.rotation.matrix
    return PoseSE3(Rotation3(ra @ b.rotation.matrix), ra @ b.position + a.position)


def inverse(a: PoseSE3) -> PoseSE3:
    rt = a.rotation.matrix.T
    return PoseSE3(Rotation3(rt), -rt @ a.position)


def rz(angle: float) -> Rotation3:
    return Rotation3(rz_matrix(angle))


def rz_matrix(angle) -> np.ndarray:
    """Rotation about +z; ``angle`` may be an array, giving shape (..., 3, 3)."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(angle.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def rx_matrix(angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(angle.shape + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = c
    out[..., 1, 2] = -s
    out[..., 2, 1] = s
    out[..., 2, 2] = c
    return out


def ry_matrix(angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(angle.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 2] = s
    out[..., 1, 1] = 1.0
    out[..., 2, 0] = -s
    out[..., 2, 2] = c
    return out


def is_rotation(m: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=np.float64)
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(m, -1, -2) @ m - eye).max() < tol
    det = np.abs(np.linalg.det(m) - 1.0).max() <= tol
    return bool(ortho and det)


# --- 6D encoding -------------------------------------------------------------


def matrix_to_rot6d(m: np.ndarray) -> np.ndarray:
    """First two columns, column-major: (..., 3, 3) -> (..., 6)."""
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def rot6d_to_matrix(v: np.ndarray, min_norm: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt on the two stored columns; third column by cross product.

    Raises DegenerateRotationError when either column is ~zero or the two are
    ~parallel.  Works on arbitrary leading batch dimensions.
    """
    v = np.asarray(v, dtype=np.float64)
    a = v[..., 0:3]
    b = v[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < min_norm) or not np.all(np.isfinite(v)):
        raise DegenerateRotationError("first column is zero or non-finite")
    c1 = a / na
    b_perp = b - np.sum(c1 * b, axis=-1, keepdims=True) * c1
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    nb_ref = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(nb < min_norm * np.maximum(nb_ref, 1.0)):
        raise DegenerateRotationError("columns are parallel or second column is zero")
    c2 = b_perp / nb
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


def to_rot6d(r: Rotation3) -> np.ndarray:
    return matrix_to_rot6d(r.matrix)


def from_rot6d(v: np.ndarray) -> Rotation3:
    return Rotation3(rot6d_to_matrix(np.asarray(v, dtype=np.float64).reshape(6)))


def pose_to_vec9(rotation: np.ndarray, position: np.ndarray) -> np.ndarray:
    """Serialize (..., 3, 3) rotations and (..., 3) positions as Rot6D + position."""
    return np.concatenate([matrix_to_rot6d(rotation), np.asarray(position, dtype=np.float64)], axis=-1)


# --- SO(3) exp / log and Jacobians --------------------------------------------


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta2 = np.sum(w * w, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta2 < 1e-12
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    k = skew(w)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(m: np.ndarray) -> np.ndarray:
    """Rotation vector of (..., 3, 3) rotation matrices, angle in [0, pi]."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 2:
        return so3_log(m[None])[0]
    tr = m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]
    cos = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    vee = np.stack(
        [m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]],
        axis=-1,
    )
    theta = np.arctan2(0.5 * np.linalg.norm(vee, axis=-1), 0.5 * (tr - 1.0))
    sin = np.sin(theta)
    small = theta < 1e-6
    scale = np.where(small, 0.5 + theta * theta / 12.0, theta / (2.0 * np.where(small, 1.0, sin)))
    out = scale[..., None] * vee

    # Near pi the antisymmetric part vanishes; recover the axis from the symmetric part.
    near_pi = theta > np.pi - 1e-4
    if np.any(near_pi):
        idx = np.nonzero(near_pi)
        mp = m[idx]
        sym = (mp + np.swapaxes(mp, -1, -2)) / 2.0 - np.eye(3) * cos[idx][..., None, None]
        diag = np.diagonal(sym, axis1=-2, axis2=-1)
        col = np.argmax(diag, axis=-1)
        axis = np.take_along_axis(sym, col[:, None, None], axis=-1)[..., 0]
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        sign = np.sign(np.sum(axis * vee[idx], axis=-1))
        sign = np.where(sign == 0, 1.0, sign)
        out[idx] = axis * (theta[idx] * sign)[..., None]
    return out


def geodesic_angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle of a^T b from its trace and skew part (independent of so3_log).

    atan2 keeps full precision at both ends of [0, pi], where arccos of the
    trace alone loses half the digits.
    """
    rel = np.swapaxes(np.asarray(a), -1, -2) @ np.asarray(b)
    tr = rel[..., 0, 0] + rel[..., 1, 1] + rel[..., 2, 2]
    vee = np.stack([rel[..., 2, 1] - rel[..., 1, 2], rel[..., 0, 2] - rel[..., 2, 0], rel[..., 1, 0] - rel[..., 0, 1]],
                   axis=-1)
    return np.arctan2(0.5 * np.linalg.norm(vee, axis=-1), 0.5 * (tr - 1.0))


def so3_right_jacobian_inv(w: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: d log(R exp(d)) / d d at d = 0, where w = log(R)."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = np.sum(w * w, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta2 < 1e-8
    safe = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        1.0 / (safe * safe) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(np.where(small, 1.0, safe))),
    )
    k = skew(w)
    return np.eye(3) + 0.5 * k + coef * (k @ k)


def random_rotation(rng: np.random.Generator, size=()) -> np.ndarray:
    """Uniformly distributed rotations via normalized quaternions."""
    size = (size,) if isinstance(size, int) else tuple(size)
    q = rng.standard_normal(size + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(size + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - z * w)
    out[..., 0, 2] = 2 * (x * z + y * w)
    out[..., 1, 0] = 2 * (x * y + z * w)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - x * w)
    out[..., 2, 0] = 2 * (x * z - y * w)
    out[..., 2, 1] = 2 * (y * z + x * w)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def random_pose(rng: np.random.Generator, scale: float = 1.0) -> PoseSE3:
    return PoseSE3(Rotation3(random_rotation(rng)), rng.normal(scale=scale, size=3))


# --- batched transform arrays ---------------------------------------------------
# Sequences are stored as (R, p) arrays of shape (..., 3, 3) and (..., 3).


def poses_to_arrays(poses) -> tuple[np.ndarray, np.ndarray]:
    rot = np.stack([p.rotation.matrix for p in poses])
    pos = np.stack([p.position for p in poses])
    return rot, pos


def arrays_to_poses(rot: np.ndarray, pos: np.ndarray) -> list[PoseSE3]:
    return [PoseSE3(Rotation3(r), p) for r, p in zip(rot, pos)]


def compose_arrays(ra, pa, rb, pb):
    return ra @ rb, np.einsum("...ij,...j->...i", ra, pb) + pa


def inverse_arrays(r, p):
    rt = np.swapaxes(r, -1, -2)
    return rt, -np.einsum("...ij,...j->...i", rt, p)


def transform_points(r, p, x):
    return np.einsum("...ij,...j->...i", r, x) + p
