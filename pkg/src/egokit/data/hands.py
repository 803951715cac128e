"""Synthetic hand detections seen from a head-mounted camera."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import body
from ..geometry import PoseSE3, Rotation3, rx_matrix
from ..guidance.costs import SIDES, CameraIntrinsics, HandObservation, project

DEFAULT_INTRINSICS = CameraIntrinsics(fx=400.0, fy=400.0, cx=320.0, cy=320.0)


def default_camera_from_cpf(pitch_down: float = np.deg2rad(45.0)) -> PoseSE3:
    """Camera (x right, y down, z forward) at the CPF origin, tilted downward."""
    r_cpf_cam = np.diag([-1.0, -1.0, 1.0]) @ rx_matrix(-pitch_down)
    return PoseSE3(Rotation3(r_cpf_cam.T), np.zeros(3))


@dataclass(frozen=True)
class Corruption:
    """Depth scale on camera-frame 3D hands, pixel noise, and per-hand dropout probability."""

    scale: float = 1.0
    noise_px: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        if not self.scale > 0 or self.noise_px < 0 or not 0.0 <= self.dropout <= 1.0:
            raise ValueError("invalid corruption parameters")


def synthesize_hand_observations(seq, corruption: Corruption = Corruption(), seed: int = 0,
                                 intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
                                 camera_from_cpf: PoseSE3 | None = None) -> list[HandObservation]:
    """Project ground-truth hand joints into the camera and corrupt them.

    Keypoints come from the true joints (plus pixel noise).  The 3D wrist
    position is scaled along its camera ray, which leaves its projection
    unchanged, and wrist orientation and finger rotations are exact.
    Hands behind the camera are not observed.
    """
    rng = np.random.default_rng(seed)
    cam = camera_from_cpf or default_camera_from_cpf()
    rc, pc = cam.rotation.matrix, cam.position
    jr, jp = seq.joints()
    cpf_r, cpf_p = body.cpf_from_joints(jr, jp, np.broadcast_to(seq.beta, (seq.length, 2)))
    out = []
    for t in range(seq.length):
        for side in SIDES:
            keep = rng.random() >= corruption.dropout
            noise = rng.standard_normal((16, 2)) * corruption.noise_px
            if not keep:
                continue
            hand = body.DEFAULT_SKELETON.hand_joint_indices(side)
            q = (jp[t, hand] - cpf_p[t]) @ cpf_r[t]  # CPF frame
            p_cam = q @ rc.T + pc
            if p_cam[0, 2] <= 1e-6:
                continue
            px = project(intrinsics, np.where(p_cam[:, 2:] > 1e-6, p_cam, np.nan)) + noise
            wrist_cam = corruption.scale * p_cam[0]
            wrist_world = cpf_r[t] @ (rc.T @ (wrist_cam - pc)) + cpf_p[t]
            wrist = PoseSE3(Rotation3(jr[t, hand[0]]), wrist_world)
            local = seq.local_rot[t, hand[1:] - 1]
            out.append(HandObservation(t, side, intrinsics, cam, px, wrist, local))
    return out
