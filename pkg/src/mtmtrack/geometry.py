"""Oriented boxes, box keypoints, 3D IoU and the template-centred frame.

Boxes carry yaw only (rotation about +z). Keypoints are the centre followed
by the eight corners in a fixed order: the local sign pattern of
``(l/2, w/2, h/2)`` runs ``+++, ++-, +-+, +--, -++, -+-, --+, ---``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

NUM_KEYPOINTS = 9
KEYPOINT_DIM = 3

CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=np.float64
)


class InsufficientHistoryError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    r = math.remainder(a, 2 * math.pi)
    return r + 2 * math.pi if r <= -math.pi else r


def wrap_angles(a: np.ndarray) -> np.ndarray:
    r = np.remainder(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(r <= -np.pi, r + 2 * np.pi, r)


def rot2d(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class OrientedBox3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("center and size need three components")
        if not all(math.isfinite(v) for v in center + size + (float(self.yaw),)):
            raise ValueError("box values must be finite")
        if min(size) <= 0:
            raise ValueError(f"box size must be strictly positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def xyz(self) -> np.ndarray:
        return np.array(self.center)

    def replace(self, center=None, size=None, yaw=None) -> OrientedBox3D:
        return OrientedBox3D(
            self.center if center is None else center,
            self.size if size is None else size,
            self.yaw if yaw is None else yaw,
        )

    def volume(self) -> float:
        l, w, h = self.size
        return l * w * h

    def bev_corners(self) -> np.ndarray:
        """Footprint corners (4 x 2), counter-clockwise."""
        l, w, _ = self.size
        local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
        return local @ rot2d(self.yaw).T + np.array(self.center[:2])


def keypoints_of_box(b: OrientedBox3D) -> np.ndarray:
    """Centre plus eight corners, shape ``(9, 3)``."""
    half = np.array(b.size) / 2.0
    local = CORNER_SIGNS * half
    corners = np.empty_like(local)
    corners[:, :2] = local[:, :2] @ rot2d(b.yaw).T
    corners[:, 2] = local[:, 2]
    return np.vstack([np.zeros(3), corners]) + np.array(b.center)


def offsets_of_history(boxes: Sequence[OrientedBox3D]) -> np.ndarray:
    """Adjacent keypoint differences ``C_j - C_{j+1}``, oldest first, shape ``(N-1, 27)``."""
    if len(boxes) < 2:
        raise InsufficientHistoryError(f"need at least 2 boxes, got {len(boxes)}")
    kps = np.stack([keypoints_of_box(b).reshape(-1) for b in boxes])
    return kps[:-1] - kps[1:]


# -- track frame -----------------------------------------------------------------


def world_to_track(obj, ref: OrientedBox3D):
    """Express points (``... x 3`` or wider) or a box in the frame of ``ref``.

    The frame puts ``ref``'s centre at the origin with yaw 0. Columns past the
    third (e.g. intensity) pass through untouched.
    """
    if isinstance(obj, OrientedBox3D):
        c = world_to_track(np.array(obj.center), ref)
        return OrientedBox3D(c, obj.size, obj.yaw - ref.yaw)
    pts = np.array(obj, dtype=np.float64)
    out = pts.copy()
    xyz = pts[..., :3] - np.array(ref.center)
    out[..., :2] = xyz[..., :2] @ rot2d(ref.yaw)  # R^T applied to row vectors
    out[..., 2] = xyz[..., 2]
    return out


def track_to_world(obj, ref: OrientedBox3D):
    if isinstance(obj, OrientedBox3D):
        c = track_to_world(np.array(obj.center), ref)
        return OrientedBox3D(c, obj.size, obj.yaw + ref.yaw)
    pts = np.array(obj, dtype=np.float64)
    out = pts.copy()
    out[..., :2] = pts[..., :2] @ rot2d(ref.yaw).T + np.array(ref.center[:2])
    out[..., 2] = pts[..., 2] + ref.center[2]
    return out


def points_in_box(points: np.ndarray, b: OrientedBox3D) -> np.ndarray:
    local = world_to_track(np.asarray(points)[..., :3], OrientedBox3D(b.center, b.size, b.yaw))
    half = np.array(b.size) / 2.0
    return np.all(np.abs(local) <= half, axis=-1)


# -- IoU ------------------------------------------------------------------------------


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    out.append(_intersect(prev, cur, s_prev, s_cur))
                out.append(cur)
            elif s_prev >= 0:
                out.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: OrientedBox3D, b: OrientedBox3D) -> float:
    return polygon_area(clip_polygon(a.bev_corners(), b.bev_corners()))


def iou3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Exact IoU of two yaw-oriented boxes (footprint clipping times z overlap)."""
    za0, za1 = a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2
    zb0, zb1 = b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a.volume() + b.volume() - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def center_distance(a: OrientedBox3D, b: OrientedBox3D) -> float:
    return float(np.linalg.norm(np.subtract(a.center, b.center)))
