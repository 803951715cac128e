"""Guidance residuals over per-timestep local joint rotations.

The body is anchored at the head: the world CPF trajectory is fixed and the
root follows from the local pose, so changing any rotation on the path
between a joint and the head moves that joint in the world.  Each timestep
is one variable block of 51 x 3 tangent coordinates (right perturbations).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import body
from ..geometry import PoseSE3, skew, so3_exp, so3_log, so3_right_jacobian_inv
from .lm import ResidualBatch, ResidualProblem

NJ = body.NUM_LOCAL
BLOCK = 3 * NJ
SIDES = ("left", "right")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")


@dataclass
class HandObservation:
    """Detections for one hand at one timestep.

    keypoints2d is (16, 2) pixels for the wrist followed by the 15 finger
    joints, NaN where a joint was not detected.
    """

    timestep: int
    side: str
    intrinsics: CameraIntrinsics
    camera_from_cpf: PoseSE3
    keypoints2d: np.ndarray | None = None
    wrist_pose_world: PoseSE3 | None = None
    local_hand_rotations: np.ndarray | None = None  # (15, 3, 3)

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"hand side must be left or right, got {self.side!r}")
        if self.keypoints2d is None and self.wrist_pose_world is None:
            raise ValueError("a hand observation needs 2D keypoints or a wrist pose")
        if self.keypoints2d is not None:
            self.keypoints2d = np.asarray(self.keypoints2d, dtype=np.float64).reshape(16, 2)


@dataclass(frozen=True)
class GuidanceWeights:
    hands3d: float = 1.0
    reproj: float = 0.002
    skate: float = 10.0
    prior_abs: float = 1.0
    prior_vel: float = 10.0
    prior_fk: float = 1.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v >= 0:
                raise ValueError(f"guidance weight {k} must be non-negative")


def project(k: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) to pixels (..., 2)."""
    p = np.asarray(p_cam, dtype=np.float64)
    z = p[..., 2]
    return np.stack([k.fx * p[..., 0] / z + k.cx, k.fy * p[..., 1] / z + k.cy], -1)


def _project_jacobian(k: CameraIntrinsics, p):
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    zeros = np.zeros_like(z)
    return np.stack([np.stack([k.fx / z, zeros, -k.fx * x / z**2], -1),
                     np.stack([zeros, k.fy / z, -k.fy * y / z**2], -1)], -2)


class Kinematics:
    """FK of a pose sequence anchored to a world CPF trajectory, with position/rotation Jacobians."""

    def __init__(self, local, beta, cpf_rot, cpf_pos, skeleton=body.DEFAULT_SKELETON):
        self.skeleton = skeleton
        t = len(local)
        beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (t, 2))
        self.G, self.P = body.fk_arrays(np.broadcast_to(np.eye(3), (t, 3, 3)), np.zeros((t, 3)), local, beta, skeleton)
        self.r_rc, self.p_rc = body.cpf_from_joints(self.G, self.P, beta, skeleton)
        self.r_wc, self.p_wc = np.asarray(cpf_rot, dtype=np.float64), np.asarray(cpf_pos, dtype=np.float64)
        self.sub = skeleton.subtree_mask()[1:].astype(np.float64)  # (51 variables, 52 joints)
        self.head_sub = self.sub[:, skeleton.head_joint_index]
        # q: joint positions in the CPF frame; world positions follow from the fixed CPF pose.
        self.q = np.einsum("tji,tkj->tki", self.r_rc, self.P - self.p_rc[:, None])
        self.world = np.einsum("tij,tkj->tki", self.r_wc, self.q) + self.p_wc[:, None]
        self._root_d = None

    def root_position_jacobian(self):
        """d P_k / d delta_i in the root frame, unmasked: (T, 51, 52, 3, 3)."""
        if self._root_d is None:
            gi = self.G[:, 1:]
            rel = self.P[:, None, :, :] - self.P[:, 1:, None, :]  # (T, 51, 52, 3)
            self._root_d = -skew(rel) @ gi[:, :, None]
        return self._root_d

    def fk_jacobian(self, joints):
        """Root-frame position Jacobian for ``joints``: (T, len, 3, 153)."""
        d = self.root_position_jacobian()[:, :, joints] * self.sub[None, :, joints, None, None]
        return _to_block(d)

    def cpf_jacobian(self, joints):
        """CPF-frame position Jacobian for ``joints``: (T, len, 3, 153)."""
        mask = self.sub[:, joints] - self.head_sub[:, None]
        d = self.root_position_jacobian()[:, :, joints] * mask[None, :, :, None, None]
        d = np.einsum("tji,tnkjl->tnkil", self.r_rc, d)
        return _to_block(d)

    def world_jacobian(self, joints):
        return np.einsum("tij,tkjl->tkil", self.r_wc, self.cpf_jacobian(joints))

    def world_rotation(self, joint):
        return self.r_wc @ np.swapaxes(self.r_rc, -1, -2) @ self.G[:, joint]

    def world_rotation_jacobian_factor(self, joint):
        """Map from block tangent to the right-perturbation of the world rotation of ``joint``: (T, 3, 153)."""
        mask = self.sub[:, joint] - self.head_sub
        f = np.swapaxes(self.G[:, joint], -1, -2)[:, None] @ self.G[:, 1:] * mask[None, :, None, None]
        return np.swapaxes(f, 1, 2).reshape(len(f), 3, BLOCK)


def _to_block(d):
    """(T, 51 vars, n, 3, 3) -> (T, n, 3, 153)."""
    t, v, n = d.shape[:3]
    return d.transpose(0, 2, 3, 1, 4).reshape(t, n, 3, v * 3)


def _rotation_residual(current, target):
    """log(target^T current) and its Jacobian w.r.t. a right perturbation of ``current``."""
    r = so3_log(np.swapaxes(target, -1, -2) @ current)
    return r, so3_right_jacobian_inv(r)


@dataclass
class GuidanceInputs:
    theta_hat: np.ndarray  # (T, 51, 3, 3) denoiser rotations
    beta: np.ndarray  # (T, 2) or (2,)
    contacts: np.ndarray  # (T, 21), treated as fixed
    cpf_rot: np.ndarray
    cpf_pos: np.ndarray
    observations: list = field(default_factory=list)


class BodyGuidanceProblem(ResidualProblem):
    """All guidance terms over Theta; variables are (T, 51, 3, 3) rotation arrays."""

    def __init__(self, inputs: GuidanceInputs, weights: GuidanceWeights = GuidanceWeights(),
                 skeleton=body.DEFAULT_SKELETON):
        self.inp, self.w, self.skeleton = inputs, weights, skeleton
        self.num_blocks = len(inputs.theta_hat)
        self.block_dim = BLOCK
        for o in inputs.observations:
            if not 0 <= o.timestep < self.num_blocks:
                raise ValueError(f"observation timestep {o.timestep} outside [0, {self.num_blocks})")
        self._hat = Kinematics(inputs.theta_hat, inputs.beta, inputs.cpf_rot, inputs.cpf_pos, skeleton)
        hat = inputs.theta_hat
        self._hat_vel = so3_log(np.swapaxes(hat[:-1], -1, -2) @ hat[1:]) if len(hat) > 1 else None

    def retract(self, x, delta):
        return x @ so3_exp(delta.reshape(len(x), NJ, 3))

    def evaluate(self, x):
        kin = Kinematics(x, self.inp.beta, self.inp.cpf_rot, self.inp.cpf_pos, self.skeleton)
        out = []
        out += self.prior_terms(x, kin)
        if self.w.skate > 0 and len(x) > 1:
            out.append(self.skate_term(kin))
        if self.inp.observations:
            out += self.hand_terms(x, kin)
        return out

    # --- individual terms --------------------------------------------------

    def prior_terms(self, x, kin):
        t = len(x)
        out = []
        blocks = np.arange(t)[:, None]
        if self.w.prior_abs > 0:
            r, j = _rotation_residual(x, self.inp.theta_hat)
            s = np.sqrt(self.w.prior_abs)
            out.append(ResidualBatch("prior_abs", blocks, s * r.reshape(t, -1), s * j[:, None], diagonal=True))
        if self.w.prior_vel > 0 and t > 1:
            d = np.swapaxes(x[:-1], -1, -2) @ x[1:]
            log_d = so3_log(d)
            jr = so3_right_jacobian_inv(log_d)
            s = np.sqrt(self.w.prior_vel)
            res = s * (log_d - self._hat_vel).reshape(t - 1, -1)
            jac = np.stack([-jr @ np.swapaxes(d, -1, -2), jr], 1) * s
            out.append(ResidualBatch("prior_vel", np.column_stack([np.arange(t - 1), np.arange(1, t)]), res, jac,
                                     diagonal=True))
        if self.w.prior_fk > 0:
            joints = np.arange(1, body.NUM_JOINTS)
            s = np.sqrt(self.w.prior_fk)
            res = s * (kin.P[:, 1:] - self._hat.P[:, 1:]).reshape(t, -1)
            jac = s * kin.fk_jacobian(joints).reshape(t, -1, BLOCK)
            out.append(ResidualBatch("prior_fk", blocks, res, jac[:, None]))
        return out

    def skate_term(self, kin):
        t = len(kin.world)
        joints = np.arange(1, 22)
        psi = np.clip(np.asarray(self.inp.contacts, dtype=np.float64), 0.0, 1.0)
        c = np.sqrt(self.w.skate) * 0.5 * (psi[1:] + psi[:-1])  # (T-1, 21)
        res = c[..., None] * (kin.world[1:, joints] - kin.world[:-1, joints])
        jw = kin.world_jacobian(joints)
        jac = np.stack([-c[..., None, None] * jw[:-1], c[..., None, None] * jw[1:]], 1)
        return ResidualBatch("skate", np.column_stack([np.arange(t - 1), np.arange(1, t)]),
                             res.reshape(t - 1, -1), jac.reshape(t - 1, 2, -1, BLOCK))

    def hand_terms(self, x, kin):
        out = []
        obs = self.inp.observations
        for side_i, side in enumerate(SIDES):
            hand = list(self.skeleton.hand_joint_indices(side))
            wrist = hand[0]
            wrist_rot = kin.world_rotation(wrist)
            rot_factor = None
            jpos = None
            jhand = None
            for o in (o for o in obs if o.side == side):
                t = o.timestep
                rows, jrows = [], []
                if o.wrist_pose_world is not None and self.w.hands3d > 0:
                    s = np.sqrt(self.w.hands3d)
                    if jpos is None:
                        jpos = kin.world_jacobian([wrist])[:, 0]
                        rot_factor = kin.world_rotation_jacobian_factor(wrist)
                    rows.append(s * (kin.world[t, wrist] - o.wrist_pose_world.position))
                    jrows.append(s * jpos[t])
                    r, jr = _rotation_residual(wrist_rot[t], o.wrist_pose_world.rotation.matrix)
                    rows.append(s * r)
                    jrows.append(s * jr @ rot_factor[t])
                if o.local_hand_rotations is not None and self.w.hands3d > 0:
                    s = np.sqrt(self.w.hands3d)
                    fingers = np.array(hand[1:]) - 1
                    r, jr = _rotation_residual(x[t, fingers], np.asarray(o.local_hand_rotations))
                    j = np.zeros((15, 3, NJ, 3))
                    j[np.arange(15), :, fingers, :] = jr
                    rows.append(s * r.reshape(-1))
                    jrows.append(s * j.reshape(45, BLOCK))
                if o.keypoints2d is not None and self.w.reproj > 0:
                    s = np.sqrt(self.w.reproj)
                    rc, pc = o.camera_from_cpf.rotation.matrix, o.camera_from_cpf.position
                    p_cam = kin.q[t, hand] @ rc.T + pc
                    valid = (p_cam[:, 2] > 1e-6) & np.isfinite(o.keypoints2d).all(axis=1)
                    safe = np.where(valid[:, None], p_cam, np.array([0.0, 0.0, 1.0]))
                    px = project(o.intrinsics, safe)
                    if jhand is None:
                        jhand = kin.cpf_jacobian(hand)  # (T, 16, 3, 153)
                    jpix = _project_jacobian(o.intrinsics, safe) @ rc @ jhand[t]
                    res = np.where(valid[:, None], px - np.nan_to_num(o.keypoints2d), 0.0)
                    jpix = jpix * valid[:, None, None]
                    rows.append(s * res.reshape(-1))
                    jrows.append(s * jpix.reshape(-1, BLOCK))
                if rows:
                    out.append(ResidualBatch(f"hands_{side}", [[t]], np.concatenate(rows)[None],
                                             np.concatenate(jrows)[None, None]))
        return _merge_single_block(out)


def _merge_single_block(batches):
    """Stack single-row batches with equal residual size into one batch per name and size."""
    groups = {}
    for b in batches:
        groups.setdefault((b.name, b.residual.shape[1]), []).append(b)
    return [ResidualBatch(name, np.concatenate([b.blocks for b in g]), np.concatenate([b.residual for b in g]),
                          np.concatenate([b.jacobian for b in g])) for (name, _), g in groups.items()]


# --- scalar cost evaluators --------------------------------------------------


def _sum_sq(batches, names):
    return float(sum((b.residual**2).sum() for b in batches if b.name.startswith(names)))


def _problem(theta, beta, cpf_rot, cpf_pos, contacts=None, obs=(), theta_hat=None, weights=None):
    theta = np.asarray(theta, dtype=np.float64)
    inputs = GuidanceInputs(theta if theta_hat is None else theta_hat, beta,
                            np.zeros((len(theta), 21)) if contacts is None else contacts, cpf_rot, cpf_pos, list(obs))
    return BodyGuidanceProblem(inputs, weights or GuidanceWeights())


def cost_reproj(theta, beta, cpf_rot, cpf_pos, obs) -> float:
    """Unweighted sum of squared pixel residuals."""
    p = _problem(theta, beta, cpf_rot, cpf_pos, obs=obs, weights=GuidanceWeights(hands3d=0, reproj=1))
    kin = Kinematics(theta, beta, cpf_rot, cpf_pos)
    return _sum_sq(p.hand_terms(theta, kin), "hands")


def cost_hands3d(theta, beta, cpf_rot, cpf_pos, obs) -> float:
    """Unweighted wrist position/orientation and local finger rotation error."""
    p = _problem(theta, beta, cpf_rot, cpf_pos, obs=obs, weights=GuidanceWeights(hands3d=1, reproj=0))
    kin = Kinematics(theta, beta, cpf_rot, cpf_pos)
    return _sum_sq(p.hand_terms(theta, kin), "hands")


def cost_skate(theta, beta, cpf_rot, cpf_pos, contacts, weight: float = 1.0) -> float:
    if len(theta) < 2:
        return 0.0
    p = _problem(theta, beta, cpf_rot, cpf_pos, contacts=contacts, weights=GuidanceWeights(skate=weight))
    return _sum_sq([p.skate_term(Kinematics(theta, beta, cpf_rot, cpf_pos))], "skate")


def cost_prior(theta, theta_hat, beta, weights: GuidanceWeights = GuidanceWeights()) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    if theta.shape != theta_hat.shape:
        raise ValueError("theta and theta_hat must have equal lengths")
    t = len(theta)
    ident_r, zero_p = np.broadcast_to(np.eye(3), (t, 3, 3)), np.zeros((t, 3))
    p = _problem(theta, beta, ident_r, zero_p, theta_hat=theta_hat, weights=weights)
    return _sum_sq(p.prior_terms(theta, Kinematics(theta, beta, ident_r, zero_p)), "prior")
