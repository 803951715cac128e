"""Denoiser training on random crops of (state, conditioning) sequences."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams, init_params
from .diffusion import training_loss
from .schedule import NoiseSchedule, cosine_schedule

log = logging.getLogger(__name__)

STD_FLOOR = 1e-2


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    min_lr: float = 1e-4
    warmup: int = 100
    grad_clip: float = 1.0
    min_crop: int = 32
    max_crop: int = 128
    diffusion_steps: int = 1000
    seed: int = 0


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def normalization_stats(arrays):
    stacked = np.concatenate([np.asarray(a) for a in arrays], axis=0)
    return stacked.mean(axis=0), np.maximum(stacked.std(axis=0), STD_FLOOR)


def sample_batch(states, conds, rng, batch_size, min_crop, max_crop):
    """Equal-length random crops; the crop length is uniform in [min_crop, max_crop].

    ``conds`` is a list of per-sequence arrays to slice, or a callable
    ``(index, start, stop)`` encoding the conditioning of each crop.
    """
    shortest = min(len(s) for s in states)
    hi = min(max_crop, shortest)
    lo = min(min_crop, hi)
    length = int(rng.integers(lo, hi + 1))
    idx = rng.integers(len(states), size=batch_size)
    xs, cs = [], []
    for i in idx:
        start = int(rng.integers(0, len(states[i]) - length + 1))
        xs.append(states[i][start:start + length])
        cs.append(conds(i, start, start + length) if callable(conds) else conds[i][start:start + length])
    return np.stack(xs), np.stack(cs)


def _lr(cfg: TrainConfig, step: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + np.cos(np.pi * frac))


def train_denoiser(states, conds, arch: DenoiserConfig, cfg: TrainConfig = TrainConfig(),
                   schedule: NoiseSchedule | None = None, callback=None, crop_cond=None):
    """Train from scratch on lists of raw (T, D) states and (T, F) conditioning.

    With ``crop_cond(index, start, stop)`` the conditioning of every crop is
    re-encoded and ``conds`` only supplies normalization statistics.
    Returns (params, per-step losses).  Deterministic given ``cfg.seed``.
    """
    if not states:
        raise ValueError("no training sequences")
    rng = np.random.default_rng(cfg.seed)
    schedule = schedule or cosine_schedule(cfg.diffusion_steps)
    params = init_params(arch, rng)
    params.x_mean, params.x_std = normalization_stats(states)
    params.c_mean, params.c_std = normalization_stats(conds)
    params.meta["diffusion_steps"] = schedule.num_steps
    norm_states = [params.normalize_state(s) for s in states]

    opt = Adam(params.weights)
    losses = []
    for step in range(cfg.steps):
        x0, c = sample_batch(norm_states, crop_cond or conds, rng, cfg.batch_size, cfg.min_crop, cfg.max_crop)
        loss, grads = training_loss(params, x0, c, rng, schedule)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became non-finite at step {step}")
        gnorm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if cfg.grad_clip and gnorm > cfg.grad_clip:
            scale = cfg.grad_clip / gnorm
            grads = {k: g * scale for k, g in grads.items()}
        opt.step(params.weights, grads, _lr(cfg, step))
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
        if step % 200 == 0:
            log.info("step %d loss %.4f", step, loss)
    return params, np.array(losses)


def evaluate_loss(params: DenoiserParams, states, conds, rng, schedule: NoiseSchedule | None = None,
                  batches: int = 8, batch_size: int = 16, min_crop: int = 32, max_crop: int = 128) -> float:
    # conds: arrays or a crop callable, as in sample_batch
    """Mean training objective on held-out sequences (no parameter update)."""
    from .diffusion import noise_sample
    from .denoiser import denoise

    schedule = schedule or cosine_schedule(params.meta.get("diffusion_steps", 1000))
    norm_states = [params.normalize_state(s) for s in states]
    total = 0.0
    for _ in range(batches):
        x0, c = sample_batch(norm_states, conds, rng, batch_size, min_crop, max_crop)
        n = rng.integers(1, schedule.num_steps + 1, size=len(x0))
        xn = noise_sample(x0, n, rng.standard_normal(x0.shape), schedule)
        pred = denoise(params, xn, n, c)
        total += float((schedule.weights[n][:, None, None] * (pred - x0) ** 2).sum() / len(x0))
    return total / batches
