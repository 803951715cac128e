"""Body estimation metrics: MPJPE, PA-MPJPE, GND and head error (mm unless noted)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

GND_EPS = 0.05


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class JointTrajectory:
    positions: np.ndarray  # (T, J, 3) world, meters
    head: int | None = None
    feet: tuple = ()

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 3 or p.shape[-1] != 3:
            raise MetricError(f"expected (T, J, 3) positions, got {p.shape}")
        object.__setattr__(self, "positions", p)


def _positions(x) -> np.ndarray:
    return x.positions if isinstance(x, JointTrajectory) else np.asarray(x, dtype=np.float64)


def _check(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")


def mpjpe(pred, gt) -> float:
    p, g = _positions(pred), _positions(gt)
    _check(p, g)
    return float(np.linalg.norm(p - g, axis=-1).mean() * 1000.0)


def similarity_align(pred: np.ndarray, gt: np.ndarray, with_scale: bool = True):
    """Least-squares s, R, t with ``s R pred + t ~ gt`` for (J, 3) point sets (Umeyama)."""
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    xp, xg = pred - mu_p, gt - mu_g
    cov = xg.T @ xp / len(pred)
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = (u * d) @ vt
    var_p = (xp**2).sum() / len(pred)
    scale = float((s * d).sum() / var_p) if with_scale and var_p > 0 else 1.0
    trans = mu_g - scale * rot @ mu_p
    return scale, rot, trans


def _degenerate(points: np.ndarray, tol: float = 1e-9) -> bool:
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    return sv[0] == 0 or sv[1] / sv[0] < tol


def pa_mpjpe_frames(pred, gt, with_scale: bool = True):
    """Per-frame Procrustes-aligned errors (mm) with NaN for excluded frames, plus the exclusion count."""
    p, g = _positions(pred), _positions(gt)
    _check(p, g)
    out = np.full(len(p), np.nan)
    excluded = 0
    for t in range(len(p)):
        if p.shape[1] < 3 or _degenerate(g[t]) or _degenerate(p[t]):
            excluded += 1
            continue
        s, r, tr = similarity_align(p[t], g[t], with_scale)
        aligned = s * p[t] @ r.T + tr
        out[t] = np.linalg.norm(aligned - g[t], axis=-1).mean() * 1000.0
    return out, excluded


def pa_mpjpe(pred, gt, with_scale: bool = True) -> float:
    frames, _ = pa_mpjpe_frames(pred, gt, with_scale)
    if np.all(np.isnan(frames)):
        raise MetricError("every frame is degenerate")
    return float(np.nanmean(frames))


def gnd(pred: JointTrajectory, floor_z: float = 0.0, eps: float = GND_EPS) -> int:
    if not pred.feet:
        raise MetricError("trajectory has no foot joints labeled")
    clearance = pred.positions[:, list(pred.feet), 2] - floor_z
    return int(clearance.min() <= eps)


def t_head(pred: JointTrajectory, gt: JointTrajectory) -> float:
    if pred.head is None or gt.head is None:
        raise MetricError("head joint label missing")
    _check(pred.positions, gt.positions)
    d = pred.positions[:, pred.head] - gt.positions[:, gt.head]
    return float(np.linalg.norm(d, axis=-1).mean() * 1000.0)


def mean_stderr(values) -> tuple[float, float, int]:
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    n = len(v)
    if n == 0:
        return float("nan"), float("nan"), 0
    se = float(v.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(v.mean()), se, n


def metrics_csv(rows) -> str:
    """``rows``: iterable of (metric, value, stderr, n)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "stderr", "n"])
    for name, value, se, n in rows:
        w.writerow([name, f"{value:.6f}", f"{se:.6f}", n])
    return buf.getvalue()
