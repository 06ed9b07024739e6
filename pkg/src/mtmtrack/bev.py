"""Region cropping, voxelisation and the bird's-eye-view encoder.

The BEV encoder is pillar-style: per-voxel statistics are stacked along z
into channels and passed through two conv+ReLU blocks whose weights are
shared between the template and search branches.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import OrientedBox3D, rot2d, world_to_track

MAX_POINTS_PER_VOXEL = 32
VOXEL_STATS = 5  # occupancy, count, mean offset (x, y, z)


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class RegionSpec:
    x_range: tuple[float, float] = (-3.2, 3.2)
    y_range: tuple[float, float] = (-3.2, 3.2)
    z_range: tuple[float, float] = (-3.0, 1.0)
    voxel_size: tuple[float, float, float] = (0.1, 0.1, 0.2)
    bev_stride: int = 1

    def __post_init__(self):
        for lo_hi, v in zip((self.x_range, self.y_range, self.z_range), self.voxel_size):
            n = (lo_hi[1] - lo_hi[0]) / v
            if v <= 0 or n < 1 or abs(n - round(n)) > 1e-6:
                raise ValueError(f"range {lo_hi} is not divisible by voxel size {v}")
        if self.bev_stride < 1:
            raise ValueError("bev_stride must be >= 1")
        nx, ny, _ = self.voxel_grid
        if nx % self.bev_stride or ny % self.bev_stride:
            raise ValueError("bev_stride must divide the voxel grid")

    @classmethod
    def full_resolution(cls) -> RegionSpec:
        return cls(voxel_size=(0.025, 0.025, 0.05))

    @property
    def voxel_grid(self) -> tuple[int, int, int]:
        return tuple(
            int(round((r[1] - r[0]) / v))
            for r, v in zip((self.x_range, self.y_range, self.z_range), self.voxel_size)
        )

    @property
    def bev_shape(self) -> tuple[int, int]:
        nx, ny, _ = self.voxel_grid
        return nx // self.bev_stride, ny // self.bev_stride

    @property
    def cell_size(self) -> tuple[float, float]:
        return self.voxel_size[0] * self.bev_stride, self.voxel_size[1] * self.bev_stride

    def cell_centers(self) -> np.ndarray:
        """Metric (x, y) of every BEV cell centre, shape ``H x L x 2``."""
        H, L = self.bev_shape
        cx, cy = self.cell_size
        xs = self.x_range[0] + (np.arange(H) + 0.5) * cx
        ys = self.y_range[0] + (np.arange(L) + 0.5) * cy
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)

    def to_index(self, xy) -> np.ndarray:
        """Metric (x, y) -> fractional cell index, cell centres at integers."""
        xy = np.asarray(xy, dtype=np.float64)
        cx, cy = self.cell_size
        return np.stack([(xy[..., 0] - self.x_range[0]) / cx - 0.5,
                         (xy[..., 1] - self.y_range[0]) / cy - 0.5], axis=-1)

    def to_metric(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        cx, cy = self.cell_size
        return np.stack([self.x_range[0] + (idx[..., 0] + 0.5) * cx,
                         self.y_range[0] + (idx[..., 1] + 0.5) * cy], axis=-1)


def crop_region(points: np.ndarray, ref: OrientedBox3D, spec: RegionSpec) -> np.ndarray:
    """Move points into ``ref``'s frame and keep those inside the region (half-open ranges)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, pts.shape[1] if pts.ndim == 2 else 3))
    local = world_to_track(pts, ref)
    keep = np.ones(len(local), dtype=bool)
    for axis, (lo, hi) in enumerate((spec.x_range, spec.y_range, spec.z_range)):
        keep &= (local[:, axis] >= lo) & (local[:, axis] < hi)
    return local[keep]


def voxelize(points: np.ndarray, spec: RegionSpec) -> np.ndarray:
    """Per-voxel statistics, shape ``X x Y x Z x 5``.

    Channels: occupancy flag, point count clipped at 32, and the mean point
    offset from the voxel centre in units of voxel size. The result does not
    depend on point order.
    """
    nx, ny, nz = spec.voxel_grid
    grid = np.zeros((nx, ny, nz, VOXEL_STATS), dtype=np.float32)
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return grid
    pts = pts.reshape(-1, pts.shape[-1])[:, :3]
    lo = np.array([spec.x_range[0], spec.y_range[0], spec.z_range[0]])
    vs = np.array(spec.voxel_size)
    rel = (pts - lo) / vs
    idx = np.floor(rel).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.array([nx, ny, nz])), axis=1)
    rel, idx = rel[ok], idx[ok]
    if len(idx) == 0:
        return grid
    local = rel - idx - 0.5
    flat = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    # canonical order makes the float sums independent of input order
    order = np.lexsort((local[:, 2], local[:, 1], local[:, 0], flat))
    flat, local = flat[order], local[order]
    starts = np.flatnonzero(np.r_[True, flat[1:] != flat[:-1]])
    counts = np.diff(np.r_[starts, len(flat)])
    sums = np.add.reduceat(local, starts, axis=0)
    cells = grid.reshape(-1, VOXEL_STATS)
    vox = flat[starts]
    cells[vox, 0] = 1.0
    cells[vox, 1] = np.minimum(counts, MAX_POINTS_PER_VOXEL)
    cells[vox, 2:] = sums / counts[:, None]
    return grid


def bev_input(voxels: np.ndarray) -> np.ndarray:
    """Flatten z and voxel stats into channels; counts are scaled to [0, 1]."""
    v = voxels.astype(np.float32, copy=True)
    v[..., 1] /= MAX_POINTS_PER_VOXEL
    nx, ny, nz, s = v.shape
    return v.reshape(nx, ny, nz * s)


def init_bev_weights(spec: RegionSpec, channels: int, rng: np.random.Generator) -> dict[str, T.Tensor]:
    cin = spec.voxel_grid[2] * VOXEL_STATS
    return {
        "bev.conv1.w": T.parameter(_he((3, 3, cin, channels), rng)),
        "bev.conv1.b": T.parameter(np.zeros(channels)),
        "bev.conv2.w": T.parameter(_he((3, 3, channels, channels), rng)),
        "bev.conv2.b": T.parameter(np.zeros(channels)),
    }


def _he(shape, rng: np.random.Generator) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def encode_bev(voxels, weights: dict, spec: RegionSpec | None = None) -> T.Tensor:
    """Two conv+ReLU blocks over the z-stacked voxel grid -> ``H x L x D``."""
    x = voxels if isinstance(voxels, T.Tensor) else T.Tensor(bev_input(voxels))
    stride = spec.bev_stride if spec is not None else 1
    x = T.relu(T.conv2d(x, weights["bev.conv1.w"], weights["bev.conv1.b"], stride=stride, pad=1))
    return T.relu(T.conv2d(x, weights["bev.conv2.w"], weights["bev.conv2.b"], stride=1, pad=1))


def footprint_mask(box: OrientedBox3D, spec: RegionSpec) -> np.ndarray:
    """1 where a cell centre lies inside the box's rotated footprint, shape ``H x L x 1``."""
    centers = spec.cell_centers() - np.array(box.center[:2])
    local = centers @ rot2d(box.yaw)
    l, w, _ = box.size
    inside = (np.abs(local[..., 0]) <= l / 2) & (np.abs(local[..., 1]) <= w / 2)
    return inside[..., None].astype(np.float32)


def template_mask(ref: OrientedBox3D, spec: RegionSpec) -> np.ndarray:
    """Occupancy mask of the template target; ``ref`` is given in the track frame."""
    return footprint_mask(ref, spec)


# -- KITTI velodyne files ---------------------------------------------------------


def read_velodyne(path) -> np.ndarray:
    """Read a velodyne ``.bin`` scan as ``N x 4`` float32 (x, y, z, intensity)."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of 16 bytes")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(-1, 4)


def write_velodyne(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError("points must be N x 3 or N x 4")
    if pts.shape[1] == 3:
        pts = np.hstack([pts, np.zeros((len(pts), 1), dtype=np.float32)])
    Path(path).write_bytes(pts.astype("<f4").tobytes())
