from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion constants indexed by step n = 0..N (index 0 is the clean sample)."""

    alpha_bar: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.alpha_bar) - 1

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab[0] != 1.0 or np.any(np.diff(ab) > 0) or np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar must start at 1 and decrease monotonically within (0, 1]")
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("sigma must be non-negative")


def cosine_schedule(num_steps: int = 1000, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    t = np.arange(num_steps + 1, dtype=np.float64) / num_steps
    f = np.cos((t + offset) / (1 + offset) * np.pi / 2) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, max_beta)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    sigma = np.concatenate([[0.0], np.sqrt(betas)])
    return NoiseSchedule(alpha_bar=alpha_bar, sigma=sigma, weights=np.ones(num_steps + 1))


def ddim_timesteps(num_steps: int, steps: int) -> np.ndarray:
    """Strided decreasing subsequence of {N..1}, always starting at N, followed by 0."""
    if steps < 1:
        raise ValueError("need at least one sampling step")
    steps = min(steps, num_steps)
    seq = np.round(np.linspace(num_steps, 1, steps)).astype(int)
    return np.concatenate([seq, [0]])
