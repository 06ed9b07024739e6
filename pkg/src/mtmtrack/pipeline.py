"""Full two-stage model: configuration, weight initialisation and one frame-pair pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .bev import RegionSpec, crop_region, encode_bev, init_bev_weights, template_mask, voxelize
from .bmp import BmpConfig, bmp_predict, history_offsets, init_bmp_weights, keypoint_mean, pad_history
from .geometry import OrientedBox3D, world_to_track
from .irm import (
    IrmConfig,
    RegressionMaps,
    build_corr,
    init_head_weights,
    init_irm_weights,
    init_motion,
    read_state,
    refine,
    regress_heads,
)
from .rim import RimConfig, init_rim_weights, rim_forward


@dataclass(frozen=True)
class ModelConfig:
    region: RegionSpec = field(default_factory=RegionSpec)
    bmp: BmpConfig = field(default_factory=BmpConfig)
    rim: RimConfig = field(default_factory=RimConfig)
    irm: IrmConfig = field(default_factory=IrmConfig)

    @property
    def channels(self) -> int:
        return self.rim.channels


def init_weights(cfg: ModelConfig, seed: int = 0) -> dict[str, T.Tensor]:
    rng = np.random.default_rng(seed)
    w: dict[str, T.Tensor] = {}
    w.update(init_bmp_weights(cfg.bmp, rng))
    w.update(init_bev_weights(cfg.region, cfg.channels, rng))
    w.update(init_rim_weights(cfg.rim, rng))
    w.update(init_irm_weights(cfg.irm, rng))
    w.update(init_head_weights(cfg.channels, cfg.irm.head_hidden, rng))
    return w


@dataclass
class PairOutput:
    pred_offsets: T.Tensor       # 1 x 27
    coarse: T.Tensor             # 1 x 3, track frame of the reference box
    motion0: T.Tensor            # H x L x 2
    motion: T.Tensor             # H x L x 2 after refinement
    maps: RegressionMaps
    snapshots: list = field(default_factory=list)


def encode_pair(template_pts: np.ndarray, search_pts: np.ndarray, ref: OrientedBox3D,
                weights, cfg: ModelConfig) -> tuple[T.Tensor, T.Tensor, np.ndarray]:
    """Crop both clouds around ``ref`` and encode them with the shared BEV weights."""
    spec = cfg.region
    fx = encode_bev(voxelize(crop_region(template_pts, ref, spec), spec), weights, spec)
    fs = encode_bev(voxelize(crop_region(search_pts, ref, spec), spec), weights, spec)
    mask = template_mask(world_to_track(ref, ref), spec)
    return fx, fs, mask


def forward_pair(history: Sequence[OrientedBox3D], template_pts: np.ndarray, search_pts: np.ndarray,
                 weights, cfg: ModelConfig, *, use_bmp_init: bool = True, init_offset=None,
                 keep_snapshots: bool = False) -> PairOutput:
    """Run both stages for frame t given history up to t-1 (newest box is the reference).

    ``init_offset`` adds a constant (dx, dy) to the initial motion map
    (training-time jitter); ``use_bmp_init=False`` starts refinement from zero.
    """
    ref = pad_history(history, cfg.bmp.history_len)[-1]
    offsets = history_offsets(history, cfg.bmp.history_len)
    pred = bmp_predict(offsets, weights, cfg.bmp)
    coarse = keypoint_mean(pred)

    fx, fs, mask = encode_pair(template_pts, search_pts, ref, weights, cfg)
    fx_hat, fs_hat = rim_forward(fx, mask, fs, weights, cfg.rim)
    corr = build_corr(fx_hat, fs_hat, cfg.irm.scale_corr)

    H, L = cfg.region.bev_shape
    # stage one seeds refinement as a constant: the BMP learns from the keypoint loss alone
    m0 = init_motion(coarse.detach() if use_bmp_init else np.zeros(3, np.float32), (H, L))
    if init_offset is not None:
        m0 = m0 + np.asarray(init_offset, dtype=np.float32).reshape(1, 1, 2)
    snaps: list = [] if keep_snapshots else None
    m = refine(m0, corr, weights, cfg.irm, cfg.region.cell_size, snaps)
    maps = regress_heads(fs_hat, weights)
    return PairOutput(pred, coarse, m0, m, maps, snaps or [])


def predict_box(history: Sequence[OrientedBox3D], template_pts, search_pts, weights, cfg: ModelConfig,
                *, use_bmp_init: bool = True, keep_snapshots: bool = False):
    with T.no_grad():
        out = forward_pair(history, template_pts, search_pts, weights, cfg,
                           use_bmp_init=use_bmp_init, keep_snapshots=keep_snapshots)
    ref = pad_history(history, cfg.bmp.history_len)[-1]
    box, diag = read_state(out.motion, out.maps, ref, cfg.region)
    return box, diag, out
