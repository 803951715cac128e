"""Procedural motion families used in place of motion-capture data.

Legs are driven by planted footsteps and analytic two-bone IK so that foot
contacts are exact; upper body, head and hands follow sinusoidal schedules.
Every sequence is finally placed at a random floor position and heading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import body
from ..geometry import rx_matrix, ry_matrix, rz_matrix
from .sequence import FPS, MotionSequence, is_test_id, label_contacts

FAMILIES = ("walk", "turn", "squat", "reach", "idle")

LEFT, RIGHT = 0, 1
_HIP = (1, 2)
_KNEE = (4, 5)
_ANKLE = (7, 8)
_SPINE = (3, 6, 9)
_NECK, _HEAD = 12, 15
_SHOULDER = (16, 17)
_ELBOW = (18, 19)
_WRIST = (20, 21)
_FINGER_START = (22, 37)
_THIGH = 0.40
_SHIN = 0.40
_ANKLE_HEIGHT = 0.06  # ankle above the floor when the foot is flat, before scaling
_REACH = 0.985


@dataclass(frozen=True)
class GeneratorConfig:
    families: tuple = FAMILIES
    height_scale: tuple = (0.85, 1.15)
    arm_scale: tuple = (0.9, 1.1)
    duration: tuple = (4.5, 7.0)  # seconds
    world_extent: float = 5.0
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.families) - set(FAMILIES)
        if unknown or not self.families:
            raise ValueError(f"unknown or empty motion families: {sorted(unknown)}")
        for lo, hi in (self.height_scale, self.arm_scale, self.duration):
            if not lo <= hi:
                raise ValueError("generator ranges must be non-empty")


def _set(local, joint, rot):
    local[:, joint - 1] = rot


def _smoothstep(u):
    return u * u * (3.0 - 2.0 * u)


def _facing(yaw):
    """Body forward (+y) and right (+x) directions on the floor for a given yaw."""
    return np.stack([-np.sin(yaw), np.cos(yaw)], -1), np.stack([np.cos(yaw), np.sin(yaw)], -1)


def _leg_ik(root_rot, root_pos, hip_offset, ankle_target, foot_yaw, l1, l2):
    """Hip, knee and ankle local rotations placing the ankle at ``ankle_target`` with a flat foot."""
    hip = root_pos + np.einsum("tij,j->ti", root_rot, hip_offset)
    d = np.einsum("tji,tj->ti", root_rot, ankle_target - hip)
    dist = np.linalg.norm(d, axis=-1)
    dist_c = np.clip(dist, abs(l1 - l2) + 1e-6, (l1 + l2) * (1 - 1e-9))
    kappa = np.arccos(np.clip((dist_c**2 - l1**2 - l2**2) / (2 * l1 * l2), -1.0, 1.0))
    u = np.stack([np.zeros_like(kappa), -l2 * np.sin(kappa), -l1 - l2 * np.cos(kappa)], -1)
    u_hat = u / np.linalg.norm(u, axis=-1, keepdims=True)
    e_hat = d / dist[:, None]
    ex = np.array([1.0, 0.0, 0.0])
    a = np.stack([np.broadcast_to(ex, u_hat.shape), u_hat, np.cross(ex, u_hat)], -1)
    xp = ex - np.sum(e_hat * ex, -1, keepdims=True) * e_hat
    xp /= np.linalg.norm(xp, axis=-1, keepdims=True)
    b = np.stack([xp, e_hat, np.cross(xp, e_hat)], -1)
    r_hip = b @ np.swapaxes(a, -1, -2)
    r_knee = rx_matrix(-kappa)
    r_ankle = np.swapaxes(root_rot @ r_hip @ r_knee, -1, -2) @ rz_matrix(foot_yaw)
    return r_hip, r_knee, r_ankle


class _Builder:
    """Accumulates control signals for one sequence and turns them into joint rotations."""

    def __init__(self, rng, length, beta):
        self.rng = rng
        self.T = length
        self.t = np.arange(length) / FPS
        self.beta = beta
        self.s = beta[0]
        self.local = np.broadcast_to(np.eye(3), (length, body.NUM_LOCAL, 3, 3)).copy()
        z = np.zeros(length)
        self.head_yaw, self.head_pitch = z.copy(), z.copy()
        self.lean, self.twist, self.side_bend = z.copy(), z.copy(), z.copy()
        self.arm_down = [np.full(length, 1.35), np.full(length, 1.35)]
        self.arm_fwd = [z.copy(), z.copy()]
        self.arm_swing = [z.copy(), z.copy()]
        self.elbow = [np.full(length, 0.15), np.full(length, 0.15)]
        self.curl = np.full(length, 0.3)

    def sin(self, amp, freq, phase=None):
        phase = self.rng.uniform(0, 2 * np.pi) if phase is None else phase
        return amp * np.sin(2 * np.pi * freq * self.t + phase)

    def look_around(self, offset, amp, pitch):
        u = self.rng.uniform
        self.head_yaw += u(-offset, offset) + self.sin(u(0, amp), u(0.1, 0.4)) + self.sin(u(0, 0.1), u(0.5, 1.2))
        self.head_pitch += u(*pitch) + self.sin(u(0, 0.12), u(0.1, 0.5))

    def upper_body(self):
        for k, j in enumerate(_SPINE):
            _set(self.local, j, rz_matrix(self.twist / 3) @ rx_matrix(-self.lean / 3) @ ry_matrix(self.side_bend / 3))
        _set(self.local, _NECK, rz_matrix(0.4 * self.head_yaw) @ rx_matrix(-0.4 * self.head_pitch))
        _set(self.local, _HEAD, rz_matrix(0.6 * self.head_yaw) @ rx_matrix(-0.6 * self.head_pitch))
        for side, sign in ((LEFT, -1.0), (RIGHT, 1.0)):
            shoulder = (rx_matrix(self.arm_swing[side]) @ rz_matrix(sign * self.arm_fwd[side])
                        @ ry_matrix(sign * self.arm_down[side]))
            _set(self.local, _SHOULDER[side], shoulder)
            _set(self.local, _ELBOW[side], rz_matrix(sign * self.elbow[side]))
            _set(self.local, _WRIST[side], rz_matrix(sign * self.sin(0.1, 0.3)) @ rx_matrix(self.sin(0.1, 0.4)))
            start = _FINGER_START[side]
            for f in range(5):
                for seg, w in enumerate((0.6, 0.9, 0.7)):
                    ang = (self.curl + 0.05 * f) * w
                    if f == 4:
                        rot = rz_matrix(sign * 0.3 * ang)
                    else:
                        rot = ry_matrix(sign * ang)
                    _set(self.local, start + 3 * f + seg, rot)

    def legs(self, root_rot, root_pos, ankles, foot_yaw):
        offsets = body.DEFAULT_SKELETON.rest_offset * self.s
        for side in (LEFT, RIGHT):
            r_hip, r_knee, r_ankle = _leg_ik(root_rot, root_pos, offsets[_HIP[side]], ankles[side], foot_yaw[side],
                                             _THIGH * self.s, _SHIN * self.s)
            _set(self.local, _HIP[side], r_hip)
            _set(self.local, _KNEE[side], r_knee)
            _set(self.local, _ANKLE[side], r_ankle)

    def pelvis_height(self, root_xy, yaw, ankles, cap):
        """Highest pelvis keeping both ankles within reach, capped at ``cap``."""
        _, right = _facing(yaw)
        leg = (_THIGH + _SHIN) * self.s * _REACH
        hip_drop = 0.08 * self.s
        h = np.full(self.T, cap)
        for side, sign in ((LEFT, -1.0), (RIGHT, 1.0)):
            hip_xy = root_xy + sign * 0.09 * self.s * right
            dh = np.linalg.norm(ankles[side][:, :2] - hip_xy, axis=-1)
            h = np.minimum(h, ankles[side][:, 2] + hip_drop + np.sqrt(np.maximum(leg**2 - dh**2, 0.0)))
        return h


def _gait(b: _Builder, speed, yaw_rate):
    """Root trajectory, ankle targets and foot yaw for steady walking along an arc."""
    rng, s = b.rng, b.s
    cadence = 1.4 + 0.5 * speed  # steps per second
    period = 2.0 / cadence
    yaw0 = 0.0
    dt = 1.0 / (FPS * 8)
    t_fine = np.arange(-2 * period, b.t[-1] + 2 * period + dt, dt)
    yaw_fine = yaw0 + yaw_rate * t_fine
    fwd_fine, _ = _facing(yaw_fine)
    path = np.concatenate([[0.0], np.cumsum(0.5 * (fwd_fine[1:] + fwd_fine[:-1]) * speed * dt, axis=0)[:, 0]])
    path_y = np.concatenate([[0.0], np.cumsum(0.5 * (fwd_fine[1:] + fwd_fine[:-1]) * speed * dt, axis=0)[:, 1]])

    def at(t):
        return np.stack([np.interp(t, t_fine, path), np.interp(t, t_fine, path_y)], -1), yaw0 + yaw_rate * t

    root_xy, yaw = at(b.t)
    phase0 = rng.uniform(0, 1)
    stance = 0.6
    lift = 0.08 * s
    ankles, foot_yaw = [], []
    for side, sign, off in ((LEFT, -1.0, 0.0), (RIGHT, 1.0, 0.5)):
        cyc = b.t / period + phase0 + off
        k = np.floor(cyc)
        frac = cyc - k

        def footstep(kk):
            t_mid = (kk - phase0 - off + stance / 2) * period
            xy, fy = at(t_mid)
            _, right = _facing(fy)
            return xy + sign * 0.09 * s * right, fy

        f0, y0 = footstep(k)
        f1, y1 = footstep(k + 1)
        u = np.clip((frac - stance) / (1 - stance), 0.0, 1.0)
        w = _smoothstep(u)[:, None]
        xy = np.where((frac < stance)[:, None], f0, (1 - w) * f0 + w * f1)
        fyaw = np.where(frac < stance, y0, (1 - w[:, 0]) * y0 + w[:, 0] * y1)
        z = _ANKLE_HEIGHT * s + np.where(frac < stance, 0.0, lift * np.sin(np.pi * u))
        ankles.append(np.column_stack([xy, z]))
        foot_yaw.append(fyaw)
    swing = np.sin(2 * np.pi * (b.t / period + phase0 + 0.5))
    return root_xy, yaw, ankles, foot_yaw, swing


def _standing_feet(b: _Builder, yaw0=0.0):
    s = b.s
    width = b.rng.uniform(0.08, 0.14) * s
    _, right = _facing(np.array(yaw0))
    ankles = [np.tile(np.r_[sign * width * right, _ANKLE_HEIGHT * s], (b.T, 1)) for sign in (-1.0, 1.0)]
    return ankles, [np.full(b.T, yaw0), np.full(b.T, yaw0)]


def _walk_family(b: _Builder, turn: bool):
    u = b.rng.uniform
    if turn:
        speed = u(0.4, 0.9)
        yaw_rate = u(0.5, 1.1) * b.rng.choice([-1.0, 1.0])
    else:
        speed = u(0.7, 1.4)
        yaw_rate = u(-0.2, 0.2)
    root_xy, yaw, ankles, foot_yaw, swing = _gait(b, speed, yaw_rate)
    b.look_around(offset=0.7, amp=0.6, pitch=(0.0, 0.45))
    if turn:
        b.head_yaw += 0.4 * np.sign(yaw_rate)
    b.lean += 0.04 + 0.06 * speed
    b.twist += 0.08 * speed * swing
    for side, sign in ((LEFT, 1.0), (RIGHT, -1.0)):
        b.arm_swing[side] += sign * 0.35 * speed * swing
        b.elbow[side] += 0.15 + 0.1 * speed * np.maximum(sign * swing, 0)
    height = b.pelvis_height(root_xy, yaw, ankles, cap=0.94 * b.s) - 0.01 * b.s
    return root_xy, height, yaw, ankles, foot_yaw


def _standing_family(b: _Builder, kind: str):
    u = b.rng.uniform
    ankles, foot_yaw = _standing_feet(b)
    root_xy = np.zeros((b.T, 2))
    yaw = b.sin(u(0.0, 0.08), u(0.1, 0.3))
    drop = np.zeros(b.T)
    if kind == "squat":
        depth = u(0.15, 0.45) * b.s
        period = u(2.0, 4.0)
        pulse = 0.5 - 0.5 * np.cos(2 * np.pi * b.t / period + u(0, 2 * np.pi))
        drop = depth * pulse
        root_xy[:, 1] -= 0.35 * drop
        b.lean += 1.6 * drop / b.s
        b.look_around(offset=0.3, amp=0.3, pitch=(0.0, 0.3))
        b.head_pitch -= 0.8 * drop / b.s
        for side in (LEFT, RIGHT):
            b.arm_swing[side] += 2.0 * drop / b.s
            b.elbow[side] += 0.5 * pulse
    elif kind == "reach":
        b.look_around(offset=0.4, amp=0.3, pitch=(0.1, 0.5))
        for side, sign in ((LEFT, -1.0), (RIGHT, 1.0)):
            if b.rng.random() < 0.3 and side == LEFT:
                continue
            period = u(2.0, 4.5)
            r = 0.5 - 0.5 * np.cos(2 * np.pi * b.t / period + u(0, 2 * np.pi))
            azimuth = u(-0.3, 1.2)
            elevation = u(-0.3, 0.6)
            b.arm_down[side] -= r * (1.35 - elevation)
            b.arm_fwd[side] += r * (np.pi / 2 - azimuth)
            b.elbow[side] += r * u(0.0, 0.6) - 0.1 * r
            b.head_yaw += -sign * 0.4 * azimuth * r
            b.twist += -sign * 0.25 * r
            b.lean += 0.25 * r
            b.curl += 0.3 * r
    else:
        b.look_around(offset=1.0, amp=0.9, pitch=(-0.1, 0.5))
        sway = b.sin(u(0.01, 0.04) * b.s, u(0.1, 0.3))
        _, right = _facing(yaw)
        root_xy += sway[:, None] * right
        b.side_bend += b.sin(0.05, u(0.1, 0.3))
        for side in (LEFT, RIGHT):
            b.arm_swing[side] += b.sin(u(0, 0.3), u(0.1, 0.5))
            b.elbow[side] += np.abs(b.sin(u(0, 0.8), u(0.1, 0.3)))
    cap = b.pelvis_height(root_xy, yaw, ankles, cap=0.94 * b.s) - 0.01 * b.s
    return root_xy, cap - drop, yaw, ankles, foot_yaw


def generate_one(rng: np.random.Generator, family: str, seq_id: str, config: GeneratorConfig) -> MotionSequence:
    beta = np.array([rng.uniform(*config.height_scale), rng.uniform(*config.arm_scale)])
    length = int(round(rng.uniform(*config.duration) * FPS))
    b = _Builder(rng, length, beta)
    if family in ("walk", "turn"):
        root_xy, height, yaw, ankles, foot_yaw = _walk_family(b, turn=family == "turn")
    else:
        root_xy, height, yaw, ankles, foot_yaw = _standing_family(b, family)
    b.curl += b.sin(0.1, rng.uniform(0.1, 0.5))

    root_rot = rz_matrix(yaw)
    root_pos = np.column_stack([root_xy, height])
    b.upper_body()
    b.legs(root_rot, root_pos, ankles, foot_yaw)

    # Random floor-plane placement of the whole sequence.
    place = rz_matrix(rng.uniform(0, 2 * np.pi))
    shift = np.r_[rng.uniform(-config.world_extent, config.world_extent, 2), 0.0]
    root_rot = place @ root_rot
    root_pos = root_pos @ place.T + shift

    _, jp = body.fk_arrays(root_rot, root_pos, b.local, beta)
    contacts = label_contacts(jp)
    return MotionSequence(id=seq_id, root_rot=root_rot, root_pos=root_pos, local_rot=b.local,
                          contacts=contacts, beta=beta, family=family)


def sequence_id(config: GeneratorConfig, index: int) -> str:
    family = config.families[index % len(config.families)]
    return f"{family}-s{config.seed}-{index:05d}"


def generate(config: GeneratorConfig, count: int, split: str | None = None) -> list[MotionSequence]:
    """``count`` sequences cycling through ``config.families``; deterministic in ``config.seed``.

    ``split`` ("train" or "test") keeps only the sequences whose id falls in
    that part of the hash split; the others are never generated.
    """
    if split not in (None, "train", "test"):
        raise ValueError("split must be train, test or None")
    children = np.random.SeedSequence(config.seed).spawn(count)
    out = []
    for i, child in enumerate(children):
        seq_id = sequence_id(config, i)
        if split is not None and is_test_id(seq_id) != (split == "test"):
            continue
        family = config.families[i % len(config.families)]
        out.append(generate_one(np.random.default_rng(child), family, seq_id, config))
    return out
