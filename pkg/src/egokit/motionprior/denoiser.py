"""Transformer denoiser predicting the clean state from a noised one.

An encoder runs self-attention blocks over the conditioning sequence; a
decoder embeds the noised state plus a step embedding and alternates
self-attention, cross-attention into the encoder output, and an MLP.  Rotary
embeddings carry temporal position in every attention layer; nothing is
causal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor

MAX_WINDOW = 128


@dataclass(frozen=True)
class DenoiserConfig:
    state_dim: int
    cond_dim: int
    width: int = 64
    heads: int = 4
    enc_blocks: int = 2
    dec_blocks: int = 2
    ff_mult: int = 4
    max_len: int = MAX_WINDOW

    def __post_init__(self):
        if self.width % self.heads or (self.width // self.heads) % 2:
            raise ValueError("width must split into heads of even size")


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    weights: dict  # name -> ndarray, in declaration order
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    c_mean: np.ndarray = None
    c_std: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = self.config
        if self.x_mean is None:
            self.x_mean = np.zeros(c.state_dim)
            self.x_std = np.ones(c.state_dim)
        if self.c_mean is None:
            self.c_mean = np.zeros(c.cond_dim)
            self.c_std = np.ones(c.cond_dim)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            self.config, {k: v.copy() for k, v in self.weights.items()},
            self.x_mean.copy(), self.x_std.copy(), self.c_mean.copy(), self.c_std.copy(), dict(self.meta),
        )

    def num_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())

    def normalize_state(self, x):
        return (np.asarray(x) - self.x_mean) / self.x_std

    def denormalize_state(self, x):
        return np.asarray(x) * self.x_std + self.x_mean


def param_shapes(c: DenoiserConfig) -> list[tuple[str, tuple]]:
    w, f = c.width, c.width * c.ff_mult
    shapes = [("cond_in.w", (c.cond_dim, w)), ("cond_in.b", (w,))]

    def attn(prefix):
        return [(f"{prefix}.wq", (w, w)), (f"{prefix}.wk", (w, w)), (f"{prefix}.wv", (w, w)), (f"{prefix}.wo", (w, w))]

    def ln(prefix):
        return [(f"{prefix}.g", (w,)), (f"{prefix}.b", (w,))]

    def mlp(prefix):
        return [(f"{prefix}.w1", (w, f)), (f"{prefix}.b1", (f,)), (f"{prefix}.w2", (f, w)), (f"{prefix}.b2", (w,))]

    for i in range(c.enc_blocks):
        shapes += ln(f"enc{i}.ln1") + attn(f"enc{i}.attn") + ln(f"enc{i}.ln2") + mlp(f"enc{i}.mlp")
    shapes += ln("enc_out")
    shapes += [("x_in.w", (c.state_dim, w)), ("x_in.b", (w,)),
               ("step.w1", (w, w)), ("step.b1", (w,)), ("step.w2", (w, w)), ("step.b2", (w,))]
    for i in range(c.dec_blocks):
        shapes += (ln(f"dec{i}.ln1") + attn(f"dec{i}.self") + ln(f"dec{i}.ln2") + attn(f"dec{i}.cross")
                   + ln(f"dec{i}.ln3") + mlp(f"dec{i}.mlp"))
    shapes += ln("out_ln") + [("out.w", (w, c.state_dim)), ("out.b", (c.state_dim,))]
    return shapes


def init_params(config: DenoiserConfig, rng: np.random.Generator, zero_output: bool = False) -> DenoiserParams:
    weights = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            weights[name] = np.ones(shape)
        elif len(shape) == 1:
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.normal(scale=1.0 / np.sqrt(shape[0]), size=shape)
    if zero_output:
        weights["out.w"][:] = 0.0
        weights["out.b"][:] = 0.0
    return DenoiserParams(config, weights)


def step_embedding(n: np.ndarray, dim: int) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = n[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class _Graph:
    """One forward pass; ``w`` maps weight names to Tensors."""

    def __init__(self, config: DenoiserConfig, w: dict):
        self.c = config
        self.w = w

    def linear(self, x, name, bias=True):
        y = ad.matmul(x, self.w[f"{name}.w"])
        return ad.add(y, self.w[f"{name}.b"]) if bias else y

    def ln(self, x, name):
        return ad.layer_norm(x, self.w[f"{name}.g"], self.w[f"{name}.b"])

    def heads(self, x, batch, length):
        h = self.c.heads
        x = ad.reshape(x, (batch, length, h, self.c.width // h))
        return ad.transpose(x, (0, 2, 1, 3))

    def merge(self, x, batch, length):
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (batch, length, self.c.width))

    def attention(self, x, ctx, name, cos, sin):
        b, t = x.shape[0], x.shape[1]
        q = self.heads(ad.matmul(x, self.w[f"{name}.wq"]), b, t)
        k = self.heads(ad.matmul(ctx, self.w[f"{name}.wk"]), b, t)
        v = self.heads(ad.matmul(ctx, self.w[f"{name}.wv"]), b, t)
        out = ad.attention(ad.rope(q, cos, sin), ad.rope(k, cos, sin), v)
        return ad.matmul(self.merge(out, b, t), self.w[f"{name}.wo"])

    def mlp(self, x, name):
        h = ad.gelu(ad.add(ad.matmul(x, self.w[f"{name}.w1"]), self.w[f"{name}.b1"]))
        return ad.add(ad.matmul(h, self.w[f"{name}.w2"]), self.w[f"{name}.b2"])

    def run(self, xn: Tensor, n: np.ndarray, cond: Tensor) -> Tensor:
        c = self.c
        t = xn.shape[1]
        cos, sin = ad.rope_tables(t, c.width // c.heads)

        z = self.linear(cond, "cond_in")
        for i in range(c.enc_blocks):
            zn = self.ln(z, f"enc{i}.ln1")
            z = ad.add(z, self.attention(zn, zn, f"enc{i}.attn", cos, sin))
            z = ad.add(z, self.mlp(self.ln(z, f"enc{i}.ln2"), f"enc{i}.mlp"))
        z = self.ln(z, "enc_out")

        emb = Tensor(step_embedding(n, c.width))
        emb = ad.gelu(ad.add(ad.matmul(emb, self.w["step.w1"]), self.w["step.b1"]))
        emb = ad.add(ad.matmul(emb, self.w["step.w2"]), self.w["step.b2"])
        h = ad.add(self.linear(xn, "x_in"), ad.reshape(emb, (emb.shape[0], 1, c.width)))
        for i in range(c.dec_blocks):
            hn = self.ln(h, f"dec{i}.ln1")
            h = ad.add(h, self.attention(hn, hn, f"dec{i}.self", cos, sin))
            h = ad.add(h, self.attention(self.ln(h, f"dec{i}.ln2"), z, f"dec{i}.cross", cos, sin))
            h = ad.add(h, self.mlp(self.ln(h, f"dec{i}.ln3"), f"dec{i}.mlp"))
        return self.linear(self.ln(h, "out_ln"), "out")


def _prepare(params: DenoiserParams, xn, n, cond):
    xn = np.asarray(xn, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    single = xn.ndim == 2
    if single:
        xn, cond = xn[None], cond[None]
    c = params.config
    if xn.shape[-1] != c.state_dim or cond.shape[-1] != c.cond_dim:
        raise ValueError(f"expected state/cond dims {c.state_dim}/{c.cond_dim}, got {xn.shape[-1]}/{cond.shape[-1]}")
    if xn.shape[:2] != cond.shape[:2]:
        raise ValueError(f"state {xn.shape[:2]} and conditioning {cond.shape[:2]} disagree")
    if xn.shape[1] > c.max_len:
        raise ValueError(f"sequence length {xn.shape[1]} exceeds the maximum window {c.max_len}")
    n = np.broadcast_to(np.asarray(n, dtype=np.float64), (xn.shape[0],))
    cond = (cond - params.c_mean) / params.c_std
    return xn, n, cond, single


def denoise(params: DenoiserParams, xn, n, cond) -> np.ndarray:
    """Predicted clean (normalized) state for a noised (normalized) state.

    Accepts (T, D) or (B, T, D) states with matching raw conditioning.
    """
    xn, n, cond, single = _prepare(params, xn, n, cond)
    w = {k: Tensor(v) for k, v in params.weights.items()}
    out = _Graph(params.config, w).run(Tensor(xn), n, Tensor(cond)).data
    return out[0] if single else out


def denoise_graph(params: DenoiserParams, xn, n, cond):
    """Forward pass with gradient tracking; returns (output Tensor, weight Tensors)."""
    xn, n, cond, _ = _prepare(params, xn, n, cond)
    w = {k: Tensor(v, requires_grad=True) for k, v in params.weights.items()}
    return _Graph(params.config, w).run(Tensor(xn), n, Tensor(cond)), w
