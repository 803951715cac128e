"""Forward noising, the denoising objective, DDIM sampling and window fusion."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .. import autodiff as ad
from .denoiser import MAX_WINDOW, DenoiserParams, denoise, denoise_graph
from .schedule import NoiseSchedule, cosine_schedule, ddim_timesteps

WINDOW_STRIDE = 96


def noise_sample(x0: np.ndarray, n: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match state shape {x0.shape}")
    n = np.asarray(n)
    if np.any(n < 1) or np.any(n > schedule.num_steps):
        raise ValueError(f"noise step must lie in [1, {schedule.num_steps}]")
    ab = schedule.alpha_bar[n]
    if np.ndim(ab):
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def training_loss(params: DenoiserParams, x0: np.ndarray, cond: np.ndarray,
                  rng: np.random.Generator, schedule: NoiseSchedule):
    """Weighted x0-reconstruction loss on a (B, T, D) normalized batch and its gradient.

    Returns (loss, grads) with grads keyed like ``params.weights``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3 or len(x0) == 0:
        raise ValueError("training batch must be a non-empty (B, T, D) array")
    b = len(x0)
    n = rng.integers(1, schedule.num_steps + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    xn = noise_sample(x0, n, eps, schedule)
    pred, w = denoise_graph(params, xn, n, cond)
    diff = ad.add(pred, -x0)
    weighted = ad.mul(ad.mul(diff, diff), schedule.weights[n][:, None, None] / b)
    loss = ad.sum_all(weighted)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in w.items()}
    return float(loss.data), grads


def split_windows(length: int, window: int = MAX_WINDOW, stride: int = WINDOW_STRIDE) -> list[tuple[int, int]]:
    if length < 1:
        raise ValueError("sequence length must be positive")
    size = min(length, window)
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] + size < length:
        starts.append(length - size)
    return [(s, s + size) for s in starts]


def fuse_windows(preds, windows, length: int) -> np.ndarray:
    """Average per-window predictions onto the full timeline."""
    total = np.zeros((length,) + np.shape(preds[0])[1:])
    count = np.zeros(length)
    for p, (s, e) in zip(preds, windows):
        total[s:e] += p
        count[s:e] += 1
    if np.any(count == 0):
        raise ValueError("windows do not cover the sequence")
    return total / count.reshape((-1,) + (1,) * (total.ndim - 1))


class _Model:
    """Adapts DenoiserParams or a bare callable ``f(xn, n, cond) -> x0`` to the sampler."""

    def __init__(self, model, schedule):
        self.params = model if isinstance(model, DenoiserParams) else None
        self.fn = None if self.params is not None else model
        if schedule is None:
            n = self.params.meta.get("diffusion_steps", 1000) if self.params is not None else 1000
            schedule = cosine_schedule(n)
        self.schedule = schedule

    @property
    def state_dim(self):
        return self.params.config.state_dim if self.params is not None else None

    def predict(self, xs, n, conds):
        if self.params is not None:
            return denoise(self.params, np.stack(xs), n, np.stack(conds))
        return [np.asarray(self.fn(x, n, c), dtype=np.float64) for x, c in zip(xs, conds)]

    def to_raw(self, x):
        return self.params.denormalize_state(x) if self.params is not None else x

    def to_norm(self, x):
        return self.params.normalize_state(x) if self.params is not None else x


GuidanceHook = Callable[[np.ndarray, int, int], np.ndarray]


def _sample(model, cond, windows, steps, guidance, rng, schedule, state_dim, x_init, length):
    m = _Model(model, schedule)
    if callable(cond):
        window_conds = [np.asarray(cond(s, e), dtype=np.float64) for s, e in windows]
    else:
        cond = np.asarray(cond, dtype=np.float64)
        window_conds = [cond[s:e] for s, e in windows]
    dim = m.state_dim or state_dim
    if dim is None:
        raise ValueError("state_dim is required when sampling with a bare denoiser callable")
    rng = np.random.default_rng(0) if rng is None else rng
    x = rng.standard_normal((length, dim)) if x_init is None else np.array(x_init, dtype=np.float64)
    ab = m.schedule.alpha_bar
    ts = ddim_timesteps(m.schedule.num_steps, steps)
    total = len(ts) - 1
    for i in range(total):
        n, n_next = int(ts[i]), int(ts[i + 1])
        preds = m.predict([x[s:e] for s, e in windows], n, window_conds)
        x0_hat = fuse_windows(preds, windows, length)
        if guidance is not None:
            x0_hat = m.to_norm(guidance(m.to_raw(x0_hat), i, total))
        eps_hat = (x - np.sqrt(ab[n]) * x0_hat) / np.sqrt(1.0 - ab[n])
        x = np.sqrt(ab[n_next]) * x0_hat + np.sqrt(1.0 - ab[n_next]) * eps_hat
    return m.to_raw(x)


def ddim_sample(model, cond, steps: int = 30, guidance: GuidanceHook | None = None,
                rng: np.random.Generator | None = None, schedule: NoiseSchedule | None = None,
                state_dim: int | None = None, x_init=None, length: int | None = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM over one window.

    ``model`` is DenoiserParams (states are normalized internally and the
    result is returned in raw units) or a callable ``f(xn, n, cond) -> x0``.
    ``guidance(x0_hat, step_index, total_steps)`` may replace the clean-state
    prediction before each update.  ``cond`` may also be a callable
    ``(start, stop) -> conditioning`` together with ``length``.
    """
    length = _length(cond, length)
    return _sample(model, cond, [(0, length)], steps, guidance, rng, schedule, state_dim, x_init, length)


def fused_sample(model, cond, steps: int = 30, guidance: GuidanceHook | None = None,
                 rng: np.random.Generator | None = None, schedule: NoiseSchedule | None = None,
                 state_dim: int | None = None, x_init=None, length: int | None = None) -> np.ndarray:
    """DDIM over overlapping windows, averaging overlaps after every step.

    A callable ``cond(start, stop)`` lets each window encode its own
    conditioning, which matters for window-relative parameterizations.
    """
    length = _length(cond, length)
    return _sample(model, cond, split_windows(length), steps, guidance, rng, schedule, state_dim, x_init, length)


def _length(cond, length):
    if callable(cond):
        if length is None:
            raise ValueError("length is required with a conditioning callable")
        return int(length)
    return len(cond)
