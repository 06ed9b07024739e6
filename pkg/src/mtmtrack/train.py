"""Training driver: sample pairs from simulated tracklets, sum the three losses, step Adam.

Every step draws its data from ``default_rng([seed, step])`` so a run resumed
from a checkpoint replays exactly the same samples.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .bev import footprint_mask
from .bmp import bmp_predict, forward_offsets, history_offsets, pad_history
from .geometry import OrientedBox3D, rot2d, world_to_track
from .irm import keypoint_loss, losses
from .pipeline import ModelConfig, forward_pair, init_weights
from .sim import SimSpec, Tracklet, trajectory
from .weights_io import load_records, save_records

log = logging.getLogger(__name__)

BMP_KINDS = ("constant-velocity", "turn")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        where = f"; last good checkpoint at {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3                 # initial rate; cosine decay towards lr * lr_final_fraction
    lr_final_fraction: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float = 10.0      # 0 disables clipping
    pairs_per_step: int = 2          # frame pairs averaged into one optimiser step
    bmp_batch: int = 64              # extra history-only samples per step for the keypoint loss
    bmp_max_speed: float = 1.5       # speed range of the generated BMP histories (metres per frame)
    bmp_static_fraction: float = 0.25
    bmp_crab_fraction: float = 0.5   # share of BMP histories whose box yaw is offset from the direction of travel
    ref_sigma_xy: float = 0.1        # reference-box perturbation (metres)
    ref_sigma_z: float = 0.02
    ref_sigma_yaw: float = 0.02      # radians
    history_sigma: float = 0.02      # noise on older history boxes (metres)
    motion_jitter: float = 1.2       # largest offset added to M^0 (metres); direction uniform
    mirror: bool = True              # reflect half the pairs across the world x-axis
    crab_fraction: float = 0.5       # share of pairs whose target is turned away from its direction of travel
    checkpoint_every: int = 50
    log_every: int = 10

    def __post_init__(self):
        if self.steps < 0 or self.lr <= 0 or self.bmp_batch < 0 or self.pairs_per_step < 1:
            raise ValueError("steps >= 0, lr > 0, bmp_batch >= 0 and pairs_per_step >= 1 required")
        if not 0.0 < self.lr_final_fraction <= 1.0:
            raise ValueError("lr_final_fraction must lie in (0, 1]")
        if not all(0.0 <= f <= 1.0 for f in (self.bmp_static_fraction, self.bmp_crab_fraction, self.crab_fraction)):
            raise ValueError("bmp_static_fraction, bmp_crab_fraction and crab_fraction must lie in [0, 1]")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be >= 1")


# -- samples ---------------------------------------------------------------------------


@dataclass
class PairSample:
    history: list[OrientedBox3D]    # newest last; the newest box is the crop reference
    template: np.ndarray
    search: np.ndarray
    prev_gt: OrientedBox3D
    gt: OrientedBox3D
    init_offset: np.ndarray         # (dx, dy) added to M^0


def _perturb(box: OrientedBox3D, rng, sxy: float, sz: float, syaw: float) -> OrientedBox3D:
    c = np.array(box.center) + rng.normal(0.0, 1.0, 3) * np.array([sxy, sxy, sz])
    return box.replace(center=c, yaw=box.yaw + rng.normal(0.0, syaw))


def _mirror_box(box: OrientedBox3D) -> OrientedBox3D:
    x, y, z = box.center
    return box.replace(center=(x, -y, z), yaw=-box.yaw)


def _mirror_points(points: np.ndarray) -> np.ndarray:
    out = np.array(points, copy=True)
    out[:, 1] = -out[:, 1]
    return out


def _turn_about(points: np.ndarray, center, angle: float) -> np.ndarray:
    out = np.array(points, copy=True)
    c = np.asarray(center[:2])
    out[:, :2] = ((out[:, :2] - c) @ rot2d(angle).T + c).astype(out.dtype)
    return out


def _gt_history(tr: Tracklet, t: int, n: int) -> list[OrientedBox3D]:
    return [f.gt for f in tr.frames[max(0, t - n):t]]


def _noisy_history(tr: Tracklet, t: int, n: int, cfg: TrainConfig, rng) -> list[OrientedBox3D]:
    hist = _gt_history(tr, t, n)
    if cfg.history_sigma > 0:
        s = cfg.history_sigma
        hist = [_perturb(b, rng, s, s / 2, s / 2) for b in hist[:-1]] + hist[-1:]
    return hist


def pair_indices(tracklets: Sequence[Tracklet]) -> list[tuple[int, int]]:
    return [(i, t) for i, tr in enumerate(tracklets) for t in range(1, len(tr))]


def make_pair(tracklets, index: tuple[int, int], mcfg: ModelConfig, cfg: TrainConfig, rng,
              augment: bool = True) -> PairSample:
    i, t = index
    tr = tracklets[i]
    n = mcfg.bmp.history_len
    hist = _noisy_history(tr, t, n, cfg, rng) if augment else _gt_history(tr, t, n)
    if augment:
        hist[-1] = _perturb(hist[-1], rng, cfg.ref_sigma_xy, cfg.ref_sigma_z, cfg.ref_sigma_yaw)
        # uniform radius rather than uniform area: small corrections stay as common as large ones
        r, a = rng.uniform(0.0, cfg.motion_jitter), rng.uniform(-np.pi, np.pi)
        jitter = np.array([r * np.cos(a), r * np.sin(a)])
    else:
        jitter = np.zeros(2)
    s = PairSample(hist, tr.frames[t - 1].load_points(), tr.frames[t].load_points(),
                   tr.frames[t - 1].gt, tr.frames[t].gt, jitter.astype(np.float32))
    if augment and cfg.mirror and rng.uniform() < 0.5:
        # a mirrored scene is as plausible as the original; it keeps turn and drift targets unbiased
        s = PairSample([_mirror_box(b) for b in s.history], _mirror_points(s.template), _mirror_points(s.search),
                       _mirror_box(s.prev_gt), _mirror_box(s.gt), s.init_offset)
    if augment and rng.uniform() < cfg.crab_fraction:
        # scenes hold only target points, so turning each cloud about its own box
        # gives an exact scene where the target moves sideways relative to its heading
        d = rng.uniform(-np.pi, np.pi)
        s = PairSample([b.replace(yaw=b.yaw + d) for b in s.history],
                       _turn_about(s.template, s.prev_gt.center, d), _turn_about(s.search, s.gt.center, d),
                       s.prev_gt.replace(yaw=s.prev_gt.yaw + d), s.gt.replace(yaw=s.gt.yaw + d), s.init_offset)
    return s


def pair_targets(s: PairSample, mcfg: ModelConfig) -> dict:
    ref = pad_history(s.history, mcfg.bmp.history_len)[-1]
    local = world_to_track(s.gt, ref)
    return {
        "offsets": forward_offsets(ref, s.gt),
        "motion": np.array(local.center[:2], dtype=np.float32),
        "z": np.float32(local.center[2]),
        "theta": np.float32(local.yaw),
        "occupancy": footprint_mask(world_to_track(s.prev_gt, ref), mcfg.region),
        "reg_occupancy": footprint_mask(local, mcfg.region),
    }


def bmp_batch(size: int, mcfg: ModelConfig, cfg: TrainConfig, rng,
              augment: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """``(B, N-1, 27)`` history offsets and ``(B, 27)`` forward-offset targets.

    Histories come from freshly generated constant-velocity and turning
    trajectories (a share of them static) and always hold at least two real
    boxes, so an all-zero offset sequence only ever means "not moving".
    Stop-go and random-walk motion is left to the refinement stage: its next
    step is not predictable from the past. In a ``bmp_crab_fraction`` share
    every box is turned by one random angle, so motion is not always along
    the box heading (a tracker's own yaw estimates drift on turns).
    """
    n = mcfg.bmp.history_len
    xs, ys = [], []
    for _ in range(size):
        static = rng.uniform() < cfg.bmp_static_fraction
        spec = SimSpec(
            kind=BMP_KINDS[int(rng.integers(len(BMP_KINDS)))],
            speed=0.0 if static else float(rng.uniform(0.0, cfg.bmp_max_speed)),
            yaw_rate=float(rng.choice([-1.0, 1.0]) * rng.uniform(0.0, 0.25)),
            heading=float(rng.uniform(-np.pi, np.pi)),
            frames=n + 1,
            n_points=0,
        )
        boxes = trajectory(spec)
        if augment and rng.uniform() < cfg.bmp_crab_fraction:
            off = rng.uniform(-np.pi, np.pi)
            boxes = [b.replace(yaw=b.yaw + off) for b in boxes]
        t = int(rng.integers(2, n + 1))
        hist = boxes[max(0, t - n):t]
        if augment and cfg.history_sigma > 0:
            sg = cfg.history_sigma
            hist = [_perturb(b, rng, sg, sg / 2, sg / 2) for b in hist[:-1]] + hist[-1:]
        xs.append(history_offsets(hist, n))
        ys.append(forward_offsets(hist[-1], boxes[t]))
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float32)


# -- loss ------------------------------------------------------------------------------


@dataclass
class StepLoss:
    total: float
    kp: float
    mt: float
    reg: float
    motion0_err: float = float("nan")
    motion_err: float = float("nan")

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total, "kp": self.kp, "mt": self.mt, "reg": self.reg}


def _masked_err(m: np.ndarray, gt: np.ndarray, occ: np.ndarray) -> float:
    n = occ.sum()
    return float((np.abs(m - gt.reshape(1, 1, 2)) * occ).sum() / n) if n else float("nan")


def _pair_terms(weights, s: PairSample, mcfg: ModelConfig, use_bmp_init: bool):
    tg = pair_targets(s, mcfg)
    out = forward_pair(s.history, s.template, s.search, weights, mcfg,
                       use_bmp_init=use_bmp_init, init_offset=s.init_offset)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        terms = losses(out.pred_offsets, tg["offsets"][None], out.motion, tg["motion"],
                       out.maps, (tg["z"], tg["theta"]), tg["occupancy"], tg["reg_occupancy"])
    errs = (_masked_err(out.motion0.data, tg["motion"], tg["occupancy"]),
            _masked_err(out.motion.data, tg["motion"], tg["occupancy"]))
    return terms, errs


def _checked(t: T.Tensor) -> T.Tensor:
    if not np.isfinite(t.item()):
        raise T.NumericError("non-finite loss")
    return t


def batch_loss(weights, samples: Sequence[PairSample], mcfg: ModelConfig, extra=None, *,
               use_bmp_init: bool = True, backward: bool = False) -> StepLoss:
    """Mean of ``L_kp + L_mt + L_reg`` over ``samples``, with ``extra`` BMP samples folded into ``L_kp``.

    ``L_kp`` averages over every history (one per pair plus the extra batch);
    ``L_mt`` and ``L_reg`` average over the pairs. With ``backward`` each
    pair's share of the gradient is accumulated as soon as it is computed,
    so only one pair's graph is alive at a time.
    """
    P = len(samples)
    B = len(extra[0]) if extra is not None else 0
    kp = mt = reg = 0.0
    e0 = e = 0.0
    for s in samples:
        (l_kp, l_mt, l_reg), (m0_err, m_err) = _pair_terms(weights, s, mcfg, use_bmp_init)
        share = _checked(l_kp * (1.0 / (P + B)) + (l_mt + l_reg) * (1.0 / P))
        if backward:
            share.backward()
        kp += l_kp.item() / (P + B)
        mt += l_mt.item() / P
        reg += l_reg.item() / P
        e0 += m0_err / P
        e += m_err / P
    if B:
        xs, ys = extra
        l_extra = _checked(keypoint_loss(bmp_predict(xs, weights, mcfg.bmp), ys) * (B / (P + B)))
        if backward:
            l_extra.backward()
        kp += l_extra.item()
    return StepLoss(kp + mt + reg, kp, mt, reg, e0, e)


def pair_loss(weights, s: PairSample, mcfg: ModelConfig, extra=None, *,
              use_bmp_init: bool = True, backward: bool = False) -> StepLoss:
    return batch_loss(weights, [s], mcfg, extra, use_bmp_init=use_bmp_init, backward=backward)


# -- optimiser ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for 0-based ``step``: half a cosine from ``lr`` to ``lr * lr_final_fraction``."""
    frac = min(step, max(cfg.steps - 1, 1)) / max(cfg.steps - 1, 1)
    lo = cfg.lr * cfg.lr_final_fraction
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))


def adam_update(weights: dict[str, T.Tensor], state: AdamState, cfg: TrainConfig) -> float:
    """Apply one Adam step from the accumulated ``.grad`` buffers; returns the pre-clip grad norm."""
    grads = {k: (w.grad if w.grad is not None else np.zeros_like(w.data)) for k, w in weights.items()}
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if not math.isfinite(norm):
        raise T.NumericError("non-finite gradient norm")
    scale = cfg.max_grad_norm / norm if cfg.max_grad_norm > 0 and norm > cfg.max_grad_norm else 1.0
    lr = np.float32(lr_at(state.step, cfg))
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, w in weights.items():
        g = grads[k] * np.float32(scale)
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m.astype(np.float32), v.astype(np.float32)
        w.data = (w.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(np.float32)
        w.grad = None
    return norm


# -- checkpoints ---------------------------------------------------------------------------


def save_checkpoint(path, weights, state: AdamState) -> None:
    save_records(path, [
        {k: w.data for k, w in weights.items()},
        state.m,
        state.v,
        {"step": np.array([state.step], dtype=np.float32)},
    ])


def load_checkpoint(path) -> tuple[dict[str, T.Tensor], AdamState]:
    recs = load_records(path)
    if len(recs) != 4:
        raise ValueError(f"{path}: expected 4 records in a checkpoint, got {len(recs)}")
    weights = {k: T.parameter(v) for k, v in recs[0].items()}
    state = AdamState(int(recs[3]["step"][0]), dict(recs[1]), dict(recs[2]))
    return weights, state


# -- driver ----------------------------------------------------------------------------------


@dataclass
class TrainResult:
    weights: dict[str, T.Tensor]
    state: AdamState
    history: list[dict[str, float]]


def train_step(weights, tracklets, mcfg: ModelConfig, cfg: TrainConfig, seed: int, step: int) -> StepLoss:
    """Forward and backward for ``step``; gradients are left in ``.grad``."""
    rng = np.random.default_rng([seed, step])
    idx = pair_indices(tracklets)
    picks = rng.integers(len(idx), size=cfg.pairs_per_step)
    samples = [make_pair(tracklets, idx[int(k)], mcfg, cfg, rng) for k in picks]
    extra = bmp_batch(cfg.bmp_batch, mcfg, cfg, rng) if cfg.bmp_batch else None
    return batch_loss(weights, samples, mcfg, extra, backward=True)


def train(tracklets: Sequence[Tracklet], mcfg: ModelConfig, cfg: TrainConfig, seed: int = 0, *,
          weights: dict[str, T.Tensor] | None = None, state: AdamState | None = None,
          checkpoint: str | Path | None = None, stop_at: int | None = None,
          on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Run Adam until ``cfg.steps`` (or ``stop_at``) optimiser steps have been taken.

    On a non-finite loss the weights are rolled back to the last good
    checkpoint (saved every ``cfg.checkpoint_every`` steps) and
    :class:`TrainingDiverged` is raised.
    """
    if not pair_indices(tracklets):
        raise ValueError("training needs at least one tracklet with two or more frames")
    weights = init_weights(mcfg, seed) if weights is None else weights
    state = AdamState() if state is None else state
    ckpt = Path(checkpoint) if checkpoint is not None else None
    good = ({k: w.data.copy() for k, w in weights.items()}, state.step)
    history: list[dict[str, float]] = []
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    while state.step < end:
        step = state.step
        try:
            res = train_step(weights, tracklets, mcfg, cfg, seed, step)
            adam_update(weights, state, cfg)
        except T.NumericError:
            for k, w in weights.items():
                w.data = good[0][k].copy()
                w.grad = None
            state.step = good[1]
            raise TrainingDiverged(step, ckpt if ckpt is not None and ckpt.exists() else None) from None
        rec = {"step": step, **res.as_dict()}
        history.append(rec)
        if on_step is not None:
            on_step(step, rec)
        if step % cfg.log_every == 0:
            log.info("step %d total %.4f kp %.4f mt %.4f reg %.4f", step, rec["total"], res.kp, res.mt, res.reg)
        if state.step % cfg.checkpoint_every == 0 or state.step == end:
            good = ({k: w.data.copy() for k, w in weights.items()}, state.step)
            if ckpt is not None:
                save_checkpoint(ckpt, weights, state)
    return TrainResult(weights, state, history)


# -- evaluation helpers -------------------------------------------------------------------------


def probe_samples(tracklets, mcfg: ModelConfig, cfg: TrainConfig, seed: int, count: int,
                  augment: bool = True) -> list[tuple[PairSample, tuple]]:
    """Fixed pairs (plus their BMP batches) for before/after loss comparisons."""
    rng = np.random.default_rng([seed, 10**6])
    idx = pair_indices(tracklets)
    out = []
    for k in rng.integers(0, len(idx), count):
        s = make_pair(tracklets, idx[int(k)], mcfg, cfg, rng, augment=augment)
        extra = bmp_batch(cfg.bmp_batch, mcfg, cfg, rng, augment=augment) if cfg.bmp_batch else None
        out.append((s, extra))
    return out


def mean_probe_loss(weights, probes, mcfg: ModelConfig) -> dict[str, float]:
    acc = {"total": 0.0, "kp": 0.0, "mt": 0.0, "reg": 0.0, "motion0_err": 0.0, "motion_err": 0.0}
    with T.no_grad():
        for s, extra in probes:
            r = pair_loss(weights, s, mcfg, extra)
            for k, v in (*r.as_dict().items(), ("motion0_err", r.motion0_err), ("motion_err", r.motion_err)):
                acc[k] += v / len(probes)
    return acc
