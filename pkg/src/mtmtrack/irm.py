"""Iterative motion refinement, regression heads and training losses.

Motion maps hold per-cell (dx, dy) in metres in the template-centred frame;
they are converted to cells only inside :func:`lookup` and
:func:`read_state`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bev import RegionSpec
from .bmp import CoarseMotion
from .geometry import OrientedBox3D, track_to_world, wrap_angles
from .tensor import ShapeError


@dataclass(frozen=True)
class IrmConfig:
    iterations: int = 10
    radius: int = 4
    hidden: int = 64
    scale_corr: bool = True
    head_hidden: int = 16

    def __post_init__(self):
        if self.iterations < 1 or self.radius < 1:
            raise ValueError("iterations and radius must be >= 1")
        if self.hidden < 4 or self.head_hidden < 1:
            raise ValueError("hidden must be >= 4 and head_hidden >= 1")

    @property
    def window(self) -> int:
        return (2 * self.radius + 1) ** 2


@dataclass
class RegressionMaps:
    z: T.Tensor        # H x L x 1, metres
    sincos: T.Tensor   # H x L x 2
    theta: T.Tensor    # H x L x 1, radians in (-pi, pi]


def _conv_init(shape, rng, scale=1.0):
    fan_in = int(np.prod(shape[:-1]))
    return rng.normal(0.0, scale * math.sqrt(2.0 / fan_in), size=shape)


def init_irm_weights(cfg: IrmConfig, rng: np.random.Generator) -> dict[str, T.Tensor]:
    h, hm = cfg.hidden, cfg.hidden // 2
    p = T.parameter
    return {
        "irm.corr.w": p(_conv_init((1, 1, cfg.window, h), rng)),
        "irm.corr.b": p(np.zeros(h)),
        "irm.motion.w": p(_conv_init((3, 3, 2, hm), rng)),
        "irm.motion.b": p(np.zeros(hm)),
        "irm.fuse.w": p(_conv_init((3, 3, h + hm, h - 2), rng)),
        "irm.fuse.b": p(np.zeros(h - 2)),
        "irm.hidden.w": p(_conv_init((3, 3, h, h), rng)),
        "irm.hidden.b": p(np.zeros(h)),
        "irm.out.w": p(_conv_init((3, 3, h, 2), rng, scale=0.01)),
        "irm.out.b": p(np.zeros(2)),
    }


def init_head_weights(channels: int, hidden: int, rng: np.random.Generator) -> dict[str, T.Tensor]:
    p = T.parameter
    return {
        "heads.z.w1": p(_conv_init((3, 3, channels, hidden), rng)),
        "heads.z.b1": p(np.zeros(hidden)),
        "heads.z.w2": p(_conv_init((1, 1, hidden, 1), rng, scale=0.1)),
        "heads.z.b2": p(np.zeros(1)),
        "heads.yaw.w1": p(_conv_init((3, 3, channels, hidden), rng)),
        "heads.yaw.b1": p(np.zeros(hidden)),
        "heads.yaw.w2": p(_conv_init((1, 1, hidden, 2), rng, scale=0.1)),
        "heads.yaw.b2": p(np.array([0.0, 1.0])),
    }


# -- motion map and correlation --------------------------------------------------


def init_motion(v, shape: tuple[int, int]) -> T.Tensor:
    """Constant ``H x L x 2`` field holding the coarse (dx, dy); dz is dropped."""
    H, L = shape
    if isinstance(v, CoarseMotion):
        v = v.as_array()
    v = T.as_tensor(v)
    return T.zeros((H, L, 2)) + v.reshape(-1)[:2].reshape(1, 1, 2)


def build_corr(fx: T.Tensor, fs: T.Tensor, scale: bool = True) -> T.Tensor:
    """All-pairs dot products ``W[p, q] = <fx(p), fs(q)>``, optionally divided by sqrt(D)."""
    if fx.shape != fs.shape:
        raise ShapeError(f"build_corr: {fx.shape} vs {fs.shape}")
    H, L, D = fx.shape
    P = H * L
    w = fx.reshape(P, D) @ fs.reshape(P, D).transpose()
    if scale:
        w = w * (1.0 / math.sqrt(D))
    return w.reshape(H, L, H, L)


def window_offsets(radius: int) -> np.ndarray:
    d = np.arange(-radius, radius + 1, dtype=np.float32)
    return np.stack(np.meshgrid(d, d, indexing="ij"), -1).reshape(-1, 2)


def lookup(corr: T.Tensor, motion: T.Tensor, radius: int, cell_size=(0.1, 0.1)) -> T.Tensor:
    """Sample ``corr[p]`` on the ``(2r+1)^2`` window around ``p + motion(p) / cell_size``.

    ``corr`` is ``H x L x H x L`` or already flattened to ``HL x H x L x 1``.
    Output is ``H x L x (2r+1)^2`` with window offsets ordered x-major.
    """
    H, L = motion.shape[:2]
    P = H * L
    if corr.shape == (H, L, H, L):
        corr = corr.reshape(P, H, L, 1)
    elif corr.shape != (P, H, L, 1):
        raise ShapeError(f"lookup: volume {corr.shape} does not match motion map {motion.shape}")
    ii, jj = np.meshgrid(np.arange(H), np.arange(L), indexing="ij")
    base = np.stack([ii, jj], -1).reshape(P, 1, 2).astype(np.float32)
    inv = np.array([1.0 / cell_size[0], 1.0 / cell_size[1]], dtype=np.float32)
    centre = motion.reshape(P, 1, 2) * inv + base
    coords = centre + window_offsets(radius)[None]
    out = T.bilinear_sample(corr, coords)
    return out.reshape(H, L, -1)


def refine_step(motion: T.Tensor, corr: T.Tensor, weights, cfg: IrmConfig, cell_size=(0.1, 0.1),
                trace: dict | None = None) -> T.Tensor:
    """One update ``M + dM`` with ``R = CB(CB(F_c) | CB(M)) | M`` and ``dM = Conv(CB(R))``.

    ``CB`` is conv+ReLU and ``|`` is channel concatenation.
    """
    w = weights
    fc = lookup(corr, motion, cfg.radius, cell_size)
    if trace is not None:
        trace["corr_feature"] = fc.data
    c = T.relu(T.conv2d(fc, w["irm.corr.w"], w["irm.corr.b"]))
    m = T.relu(T.conv2d(motion, w["irm.motion.w"], w["irm.motion.b"], pad=1))
    f = T.relu(T.conv2d(T.concat([c, m], -1), w["irm.fuse.w"], w["irm.fuse.b"], pad=1))
    r = T.concat([f, motion], -1)
    h = T.relu(T.conv2d(r, w["irm.hidden.w"], w["irm.hidden.b"], pad=1))
    delta = T.conv2d(h, w["irm.out.w"], w["irm.out.b"], pad=1)
    return motion + delta


def refine(motion0: T.Tensor, corr: T.Tensor, weights, cfg: IrmConfig, cell_size=(0.1, 0.1),
           snapshots: list | None = None) -> T.Tensor:
    m = motion0
    H, L = motion0.shape[:2]
    if corr.ndim == 4 and corr.shape[-1] != 1:
        # reshape once so every iteration's sparse gradient lands on the same node
        corr = corr.reshape(H * L, H, L, 1)
    for _ in range(cfg.iterations):
        m = refine_step(m, corr, weights, cfg, cell_size)
        if snapshots is not None:
            snapshots.append(m.data.copy())
    return m


# -- heads ---------------------------------------------------------------------------


def regress_heads(fs: T.Tensor, weights) -> RegressionMaps:
    w = weights
    z = T.conv2d(T.relu(T.conv2d(fs, w["heads.z.w1"], w["heads.z.b1"], pad=1)), w["heads.z.w2"], w["heads.z.b2"])
    sc = T.conv2d(T.relu(T.conv2d(fs, w["heads.yaw.w1"], w["heads.yaw.b1"], pad=1)),
                  w["heads.yaw.w2"], w["heads.yaw.b2"])
    theta = theta_from_sincos(sc)
    return RegressionMaps(z=z, sincos=sc, theta=theta)


def theta_from_sincos(sc: T.Tensor) -> T.Tensor:
    s, c = T.split(sc, [1, 1], axis=-1)
    return T.atan2(s, c, eps=1e-6)


@dataclass
class StateDiagnostics:
    motion: tuple[float, float]
    index: tuple[float, float]
    clamped: bool
    extra: dict = field(default_factory=dict)


def read_state(motion: T.Tensor, maps: RegressionMaps, prev: OrientedBox3D, spec: RegionSpec
               ) -> tuple[OrientedBox3D, StateDiagnostics]:
    """Box at time t from the refined motion map and the z / yaw maps.

    Motion is read at the template centre (``prev`` sits at the origin of the
    track frame); z and yaw are read where the displaced centre lands in the
    search grid. The yaw is recovered from bilinearly read (sin, cos).
    """
    H, L = motion.shape[:2]
    with T.no_grad():
        c_idx = spec.to_index(np.zeros(2)).astype(np.float32)
        dxy = T.bilinear_sample(motion.detach(), T.Tensor(c_idx[None])).data[0].astype(np.float64)
        pos = spec.to_index(dxy)
        clamped = not (0 <= pos[0] <= H - 1 and 0 <= pos[1] <= L - 1)
        pos = np.clip(pos, [0, 0], [H - 1, L - 1]).astype(np.float32)
        z = float(T.bilinear_sample(maps.z.detach(), T.Tensor(pos[None])).data[0, 0])
        s, c = T.bilinear_sample(maps.sincos.detach(), T.Tensor(pos[None])).data[0]
    yaw = math.atan2(float(s), float(c))
    local = OrientedBox3D((dxy[0], dxy[1], z), prev.size, yaw)
    diag = StateDiagnostics((float(dxy[0]), float(dxy[1])), (float(pos[0]), float(pos[1])), clamped)
    return track_to_world(local, prev), diag


# -- losses ------------------------------------------------------------------------------


def keypoint_loss(pred_offsets: T.Tensor, gt_offsets) -> T.Tensor:
    diff = pred_offsets - T.as_tensor(gt_offsets)
    return (diff * diff).mean()


def motion_loss(motion: T.Tensor, gt_motion, occupancy) -> T.Tensor | None:
    occ = np.asarray(occupancy, dtype=np.float32).reshape(*motion.shape[:2], 1)
    n_pos = float(occ.sum())
    if n_pos == 0:
        warnings.warn("no occupied cells; motion loss skipped", RuntimeWarning, stacklevel=2)
        return None
    err = T.tabs(motion - T.as_tensor(np.broadcast_to(gt_motion, motion.shape).astype(np.float32)))
    return (err * occ).sum() * (1.0 / n_pos)


def regression_loss(maps: RegressionMaps, gt_z, gt_theta, occupancy) -> T.Tensor | None:
    occ = np.asarray(occupancy, dtype=np.float32).reshape(*maps.z.shape[:2], 1)
    n_pos = float(occ.sum())
    if n_pos == 0:
        warnings.warn("no occupied cells; regression loss skipped", RuntimeWarning, stacklevel=2)
        return None
    gz = np.broadcast_to(np.asarray(gt_z, dtype=np.float32), maps.z.shape)
    gth = np.broadcast_to(np.asarray(gt_theta, dtype=np.float32), maps.theta.shape)
    dth = maps.theta - T.as_tensor(gth)
    # shift by whole turns so the difference lies in (-pi, pi]; the shift is constant
    wrapped = dth + (wrap_angles(dth.data) - dth.data).astype(np.float32)
    err = T.tabs(maps.z - T.as_tensor(gz)) + T.tabs(wrapped)
    return (err * occ).sum() * (1.0 / n_pos)


def losses(pred_offsets, gt_offsets, motion, gt_motion, maps, gt_maps, occupancy, reg_occupancy=None):
    """``(L_kp, L_mt, L_reg)``.

    ``gt_maps`` is a ``(z, theta)`` pair of arrays. ``occupancy`` masks the
    motion term; ``reg_occupancy`` (default: the same mask) masks the z/yaw
    term. A masked term with no occupied cells is returned as 0 with a warning.
    """
    l_kp = keypoint_loss(pred_offsets, gt_offsets)
    l_mt = motion_loss(motion, gt_motion, occupancy)
    reg_occ = occupancy if reg_occupancy is None else reg_occupancy
    l_reg = regression_loss(maps, gt_maps[0], gt_maps[1], reg_occ)
    zero = T.Tensor(np.float32(0.0))
    return l_kp, (zero if l_mt is None else l_mt), (zero if l_reg is None else l_reg)
