"""Floor height from sparse SLAM points with a z-only RANSAC."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class InsufficientPointsError(ValueError):
    pass


@dataclass(frozen=True)
class SparsePointCloud:
    points: np.ndarray  # (N, 3) meters
    confidence: np.ndarray  # (N,)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        conf = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if len(pts) != len(conf):
            raise ValueError(f"{len(pts)} points but {len(conf)} confidences")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(conf))) or np.any(conf < 0):
            raise ValueError("points must be finite and confidences non-negative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "confidence", conf)


@dataclass(frozen=True)
class FloorConfig:
    inlier_threshold: float = 0.01
    iterations: int = 1000
    min_confidence: float = 0.5
    min_points: int = 50
    seed: int = 0


@dataclass(frozen=True)
class FloorEstimate:
    z: float
    inliers: int


def estimate_floor(cloud: SparsePointCloud, config: FloorConfig = FloorConfig(), rng=None) -> FloorEstimate:
    """Best-supported horizontal plane height.

    Each round hypothesizes the height of one random confident point and counts
    points within ``inlier_threshold``; the mean height of the largest inlier
    set is returned.
    """
    z = cloud.points[cloud.confidence >= config.min_confidence, 2]
    if len(z) < config.min_points:
        raise InsufficientPointsError(
            f"need at least {config.min_points} confident points, got {len(z)}"
        )
    rng = np.random.default_rng(config.seed) if rng is None else rng
    hyp = z[rng.integers(len(z), size=config.iterations)]
    zs = np.sort(z)
    tau = config.inlier_threshold
    counts = np.searchsorted(zs, hyp + tau, side="left") - np.searchsorted(zs, hyp - tau, side="right")
    best = hyp[int(np.argmax(counts))]
    mask = np.abs(z - best) < tau
    return FloorEstimate(z=float(z[mask].mean()), inliers=int(mask.sum()))


def load_point_cloud(path) -> SparsePointCloud:
    """Text format, one ``x y z confidence`` record per line, ``#`` comments."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return SparsePointCloud(arr[:, :3], arr[:, 3])


def save_point_cloud(cloud: SparsePointCloud, path) -> None:
    lines = ["# x y z confidence"]
    for p, c in zip(cloud.points, cloud.confidence):
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {c:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def synthetic_floor_cloud(rng: np.random.Generator, floor_z: float = 0.5, inliers: int = 700,
                          outliers: int = 300, spread: float = 0.005, extent: float = 5.0) -> SparsePointCloud:
    """Inliers uniform within ``spread`` of the floor, outliers uniform in z in [0, 3]."""
    pin = np.column_stack([
        rng.uniform(-extent, extent, inliers),
        rng.uniform(-extent, extent, inliers),
        rng.uniform(floor_z - spread, floor_z + spread, inliers),
    ])
    pout = np.column_stack([
        rng.uniform(-extent, extent, outliers),
        rng.uniform(-extent, extent, outliers),
        rng.uniform(0.0, 3.0, outliers),
    ])
    return SparsePointCloud(np.vstack([pin, pout]), np.ones(inliers + outliers))
