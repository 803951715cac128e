"""Denoiser checkpoint file.

Little-endian layout::

    8 bytes   magic  b"EGOKITDN"
    u32       format version (1)
    u32 x 8   state_dim, cond_dim, width, heads, enc_blocks, dec_blocks, ff_mult, max_len
    u32       diffusion step count N
    u32, str  length-prefixed UTF-8 conditioning variant tag
    f64[...]  x_mean, x_std (state_dim each), c_mean, c_std (cond_dim each)
    f64[...]  every weight array, flattened row-major, in declaration order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams, param_shapes

MAGIC = b"EGOKITDN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(params: DenoiserParams) -> bytes:
    c = params.config
    variant = str(params.meta.get("variant", "")).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<8I", c.state_dim, c.cond_dim, c.width, c.heads, c.enc_blocks, c.dec_blocks, c.ff_mult, c.max_len),
        struct.pack("<I", int(params.meta.get("diffusion_steps", 1000))),
        struct.pack("<I", len(variant)),
        variant,
    ]
    for arr in (params.x_mean, params.x_std, params.c_mean, params.c_std):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for name, shape in param_shapes(c):
        w = params.weights[name]
        if w.shape != shape:
            raise CheckpointError(f"weight {name} has shape {w.shape}, expected {shape}")
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> DenoiserParams:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not an egokit denoiser checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    dims = struct.unpack("<8I", take(32))
    config = DenoiserConfig(*dims)
    (steps,) = struct.unpack("<I", take(4))
    (vlen,) = struct.unpack("<I", take(4))
    variant = bytes(take(vlen)).decode("utf-8")

    def floats(count):
        return np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)

    x_mean, x_std = floats(config.state_dim), floats(config.state_dim)
    c_mean, c_std = floats(config.cond_dim), floats(config.cond_dim)
    weights = {}
    for name, shape in param_shapes(config):
        weights[name] = floats(int(np.prod(shape))).reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last weight array")
    meta = {"diffusion_steps": steps, "variant": variant}
    return DenoiserParams(config, weights, x_mean, x_std, c_mean, c_std, meta)


def save_checkpoint(params: DenoiserParams, path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load_checkpoint(path) -> DenoiserParams:
    return from_bytes(Path(path).read_bytes())
