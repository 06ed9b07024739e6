"""Synthetic single-target scenes: a rigid box-surface point template moved along a trajectory."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .bev import read_velodyne
from .geometry import OrientedBox3D, rot2d

TRAJECTORY_KINDS = ("constant-velocity", "turn", "stop-go", "random-walk")


@dataclass(frozen=True)
class SimSpec:
    kind: str = "constant-velocity"
    speed: float = 1.0              # metres per frame
    yaw_rate: float = 0.0           # radians per frame (turn) or heading noise scale (random-walk)
    size: tuple[float, float, float] = (1.8, 0.9, 1.6)
    n_points: int = 500
    dropout: float = 0.0
    noise: float = 0.0
    frames: int = 20
    seed: int = 0
    start: tuple[float, float, float] = (0.0, 0.0, 0.0)
    heading: float = 0.0
    stop_go_period: int = 3

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}; expected one of {TRAJECTORY_KINDS}")
        if self.frames < 1 or self.n_points < 0:
            raise ValueError("frames must be >= 1 and n_points >= 0")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")
        if self.noise < 0 or self.speed < 0:
            raise ValueError("noise and speed must be non-negative")
        if self.stop_go_period < 1:
            raise ValueError("stop_go_period must be >= 1")

    def with_(self, **kw) -> SimSpec:
        return replace(self, **kw)


@dataclass
class Frame:
    frame_id: int
    points: np.ndarray | str | Path
    gt: OrientedBox3D | None = None

    def load_points(self) -> np.ndarray:
        if isinstance(self.points, np.ndarray):
            return self.points
        path = Path(self.points)
        if not path.is_file():
            raise FileNotFoundError(f"frame {self.frame_id}: point cloud {path} not found")
        if path.suffix == ".npy":
            return np.load(path)
        return read_velodyne(path)


@dataclass
class Tracklet:
    frames: list[Frame] = field(default_factory=list)

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("frame ids must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def boxes(self) -> list[OrientedBox3D | None]:
        return [f.gt for f in self.frames]

    def stripped(self) -> Tracklet:
        """Copy with ground truth kept only for the first frame."""
        frames = [Frame(f.frame_id, f.points, f.gt if i == 0 else None) for i, f in enumerate(self.frames)]
        return Tracklet(frames)


def surface_template(size: Sequence[float], n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniformly distributed over the surface of an axis-aligned box at the origin."""
    l, w, h = size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array(size)
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    uv[np.arange(n), axis] = sign * np.array(size)[axis]
    return uv


def trajectory(spec: SimSpec) -> list[OrientedBox3D]:
    """Ground-truth boxes; the box heading follows the direction of travel."""
    rng = np.random.default_rng([spec.seed, 1])
    x, y, z = spec.start
    heading = spec.heading
    boxes = [OrientedBox3D((x, y, z), spec.size, heading)]
    for t in range(1, spec.frames):
        speed = spec.speed
        if spec.kind == "turn":
            heading += spec.yaw_rate
        elif spec.kind == "stop-go":
            moving = ((t - 1) // spec.stop_go_period) % 2 == 0
            speed = spec.speed if moving else 0.0
        elif spec.kind == "random-walk":
            heading += rng.normal(0.0, spec.yaw_rate if spec.yaw_rate > 0 else 0.2)
            speed = spec.speed * rng.uniform(0.0, 1.0)
        x += speed * math.cos(heading)
        y += speed * math.sin(heading)
        boxes.append(OrientedBox3D((x, y, z), spec.size, heading))
    return boxes


def place_points(template: np.ndarray, box: OrientedBox3D) -> np.ndarray:
    out = np.empty_like(template)
    out[:, :2] = template[:, :2] @ rot2d(box.yaw).T + np.array(box.center[:2])
    out[:, 2] = template[:, 2] + box.center[2]
    return out


def simulate(spec: SimSpec) -> Tracklet:
    """Seeded tracklet: per frame the rigid template moves with the box, then noise and dropout apply."""
    template = surface_template(spec.size, spec.n_points, np.random.default_rng([spec.seed, 0]))
    boxes = trajectory(spec)
    rng = np.random.default_rng([spec.seed, 2])
    frames = []
    for t, box in enumerate(boxes):
        pts = place_points(template, box)
        if spec.noise > 0:
            pts = pts + rng.normal(0.0, spec.noise, size=pts.shape)
        keep = rng.uniform(size=len(pts)) >= spec.dropout
        frames.append(Frame(t, pts[keep].astype(np.float32), box))
    return Tracklet(frames)


def suite(seed: int = 0, frames: int = 20, n_points: int = 500, noise: float = 0.02,
          per_kind: int = 1) -> list[Tracklet]:
    """One or more tracklets of every trajectory kind with varied speeds and headings."""
    rng = np.random.default_rng([seed, 3])
    out = []
    for k, kind in enumerate(TRAJECTORY_KINDS):
        for i in range(per_kind):
            spec = SimSpec(
                kind=kind,
                speed=float(rng.uniform(0.3, 1.2)),
                yaw_rate=float(rng.choice([-1, 1]) * rng.uniform(0.08, 0.2)) if kind == "turn" else 0.15,
                heading=float(rng.uniform(-np.pi, np.pi)),
                frames=frames,
                n_points=n_points,
                noise=noise,
                dropout=0.1,
                seed=seed * 1000 + k * 100 + i,
            )
            out.append(simulate(spec))
    return out
