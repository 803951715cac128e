"""End-to-end helpers: train a prior for a conditioning variant, estimate bodies, score them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import body
from .conditioning import FEATURE_DIM, ConditioningVariant, encode_arrays
from .geometry import rot6d_to_matrix
from .guidance.costs import GuidanceWeights
from .guidance.guide import GuideConfig, make_hook
from .metrics import JointTrajectory, gnd, mpjpe, pa_mpjpe, t_head
from .motionprior.denoiser import DenoiserConfig, DenoiserParams
from .motionprior.diffusion import fused_sample
from .motionprior.train import TrainConfig, train_denoiser
from .state import CONTACT_SLICE, ROT_SLICE, SHAPE_SLICE, STATE_DIM

FOOT_JOINTS = body.DEFAULT_SKELETON.foot_joint_indices
HEAD_JOINT = body.DEFAULT_SKELETON.head_joint_index
BODY_JOINTS = 22  # root and the 21 body joints; hands are scored separately


def conditioner(variant, cpf_rot, cpf_pos, floor_z: float = 0.0):
    """Callable ``(start, stop) -> features`` encoding each window on its own.

    Heights are measured from the floor, so the trajectory is shifted by
    ``floor_z`` before encoding.
    """
    variant = ConditioningVariant.parse(variant)
    pos = np.asarray(cpf_pos, dtype=np.float64) - np.array([0.0, 0.0, floor_z])
    rot = np.asarray(cpf_rot, dtype=np.float64)
    return lambda start, stop: encode_arrays(variant, rot[start:stop], pos[start:stop])


def default_architecture(variant) -> DenoiserConfig:
    return DenoiserConfig(state_dim=STATE_DIM, cond_dim=FEATURE_DIM[ConditioningVariant.parse(variant)])


def train_variant(seqs, variant, arch: DenoiserConfig | None = None, cfg: TrainConfig = TrainConfig(),
                  callback=None):
    """Train a denoiser on generated sequences; conditioning is re-encoded per crop."""
    variant = ConditioningVariant.parse(variant)
    arch = arch or default_architecture(variant)
    states = [s.states() for s in seqs]
    cpfs = [s.cpf() for s in seqs]
    full = [encode_arrays(variant, r, p) for r, p in cpfs]

    def crop_cond(i, start, stop):
        return encode_arrays(variant, cpfs[i][0][start:stop], cpfs[i][1][start:stop])

    params, losses = train_denoiser(states, full, arch, cfg, callback=callback, crop_cond=crop_cond)
    params.meta["variant"] = variant.value
    return params, losses


@dataclass
class Estimate:
    states: np.ndarray
    local_rot: np.ndarray
    beta: np.ndarray
    contacts: np.ndarray
    root_rot: np.ndarray
    root_pos: np.ndarray
    joint_rot: np.ndarray
    joint_pos: np.ndarray
    cpf_rot: np.ndarray
    cpf_pos: np.ndarray
    floor_z: float = 0.0
    guidance_log: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.states)

    def trajectory(self) -> JointTrajectory:
        """Body joints only."""
        return JointTrajectory(self.joint_pos[:, :BODY_JOINTS], head=HEAD_JOINT, feet=FOOT_JOINTS)


def states_to_estimate(x, cpf_rot, cpf_pos, floor_z=0.0, log=None) -> Estimate:
    """Decode sampled states and place the bodies so their CPF matches the input exactly.

    The per-timestep shape predictions are averaged into one shape for the
    whole sequence.
    """
    t = len(x)
    local = rot6d_to_matrix(x[:, ROT_SLICE].reshape(t, body.NUM_LOCAL, 6))
    beta = np.broadcast_to(np.clip(x[:, SHAPE_SLICE].mean(axis=0), *body.SHAPE_RANGE), (t, body.SHAPE_DIM)).copy()
    contacts = np.clip(x[:, CONTACT_SLICE], 0.0, 1.0)
    root_r, root_p, jr, jp = body.globalize_arrays(local, beta, cpf_rot, cpf_pos)
    return Estimate(x, local, beta, contacts, root_r, root_p, jr, jp, np.asarray(cpf_rot), np.asarray(cpf_pos),
                    floor_z, log or [])


def estimate(params: DenoiserParams, cpf_rot, cpf_pos, observations=None, floor_z: float = 0.0, steps: int = 30,
             weights: GuidanceWeights = GuidanceWeights(), guide_config: GuideConfig = GuideConfig(),
             seed: int = 0, guidance: bool | None = None, variant=None) -> Estimate:
    """Sample bodies for a world CPF trajectory.

    Guidance runs when hand observations are supplied (or when forced with
    ``guidance=True``).  Sequences longer than one window use fused sampling.
    """
    variant = variant or params.meta.get("variant")
    if not variant:
        raise ValueError("checkpoint does not record its conditioning variant")
    cpf_rot = np.asarray(cpf_rot, dtype=np.float64)
    cpf_pos = np.asarray(cpf_pos, dtype=np.float64)
    observations = list(observations or [])
    use_guidance = bool(observations) if guidance is None else guidance
    log = []
    hook = make_hook(cpf_rot, cpf_pos, observations, weights, guide_config, log) if use_guidance else None
    x = fused_sample(params, conditioner(variant, cpf_rot, cpf_pos, floor_z), steps=steps, guidance=hook,
                     rng=np.random.default_rng(seed), length=len(cpf_rot))
    return states_to_estimate(x, cpf_rot, cpf_pos, floor_z, log)


def score(est: Estimate, gt_joint_pos, floor_z: float = 0.0) -> dict:
    """MPJPE, PA-MPJPE, head error (mm) and the GND indicator over the body joints."""
    gt = JointTrajectory(np.asarray(gt_joint_pos)[:, :BODY_JOINTS], head=HEAD_JOINT, feet=FOOT_JOINTS)
    pred = est.trajectory()
    return {
        "mpjpe": mpjpe(pred, gt),
        "pampjpe": pa_mpjpe(pred, gt),
        "gnd": float(gnd(pred, floor_z)),
        "t_head": t_head(pred, gt),
    }


def evaluate(params: DenoiserParams, seqs, seqlen: int, seed: int = 0, steps: int = 30, batch: int = 32):
    """Per-sequence metrics on the first ``seqlen`` frames of each sequence (no guidance).

    Sequences are sampled in batches of equal-length single windows with the
    same deterministic DDIM update as ``ddim_sample``.
    """
    from .motionprior.denoiser import denoise
    from .motionprior.schedule import cosine_schedule, ddim_timesteps

    if seqlen > params.config.max_len:
        raise ValueError("batched evaluation handles a single window; use estimate() for longer sequences")
    variant = params.meta["variant"]
    seqs = [s for s in seqs if s.length >= seqlen]
    schedule = cosine_schedule(params.meta.get("diffusion_steps", 1000))
    ts = ddim_timesteps(schedule.num_steps, steps)
    ab = schedule.alpha_bar
    rows = []
    for b0 in range(0, len(seqs), batch):
        group = seqs[b0:b0 + batch]
        cpfs = [tuple(a[:seqlen] for a in s.cpf()) for s in group]
        cond = np.stack([encode_arrays(variant, r, p) for r, p in cpfs])
        rng = np.random.default_rng([seed, b0])
        x = rng.standard_normal((len(group), seqlen, params.config.state_dim))
        for i in range(len(ts) - 1):
            n, n_next = int(ts[i]), int(ts[i + 1])
            x0 = denoise(params, x, n, cond)
            eps = (x - np.sqrt(ab[n]) * x0) / np.sqrt(1.0 - ab[n])
            x = np.sqrt(ab[n_next]) * x0 + np.sqrt(1.0 - ab[n_next]) * eps
        x = params.denormalize_state(x)
        for s, (r, p), xs in zip(group, cpfs, x):
            est = states_to_estimate(xs, r, p)
            _, gt = s.crop(0, seqlen).joints()
            rows.append(score(est, gt))
    return rows
