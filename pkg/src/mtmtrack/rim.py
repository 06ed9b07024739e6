"""Reciprocating interaction between template and search BEV features.

Top-down: a conv block per level (stride 1, then 2, then 2) followed by
interactive attention, where each branch's pooled channel gate reweights the
other branch. Bottom-up: dense-query deformable attention that samples every
level around each level-0 cell and mixes heads with per-head projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError


@dataclass(frozen=True)
class RimConfig:
    channels: int = 16
    heads: int = 4
    points: int = 4
    levels: int = 3

    def __post_init__(self):
        if not 1 <= self.levels <= 3:
            raise ValueError("levels must be in 1..3")
        if self.points < 1:
            raise ValueError("points must be >= 1")
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")


def init_rim_weights(cfg: RimConfig, rng: np.random.Generator) -> dict[str, T.Tensor]:
    D, Hd, I, K = cfg.channels, cfg.heads, cfg.levels, cfg.points
    p = T.parameter
    w = {}
    for i in range(I):
        cin = D + 1 if i == 0 else D
        w[f"rim.down{i}.w"] = p(rng.normal(0, math.sqrt(2.0 / (9 * cin)), (3, 3, cin, D)))
        w[f"rim.down{i}.b"] = p(np.zeros(D))
        w[f"rim.iam{i}.w"] = p(rng.normal(0, math.sqrt(1.0 / (2 * D)), (1, 1, 2 * D, D)))
        w[f"rim.iam{i}.b"] = p(np.zeros(D))
    # sampling offsets start on rings around the reference, one direction per head
    ang = 2 * np.pi * np.arange(Hd) / Hd
    ring = np.stack([np.cos(ang), np.sin(ang)], -1)
    ring = ring / np.abs(ring).max(-1, keepdims=True)
    bias = np.tile(ring[:, None, None, :], (1, I, K, 1)) * (np.arange(K)[None, None, :, None] + 1) * 0.5
    w["rim.deform.off.w"] = p(np.zeros((2 * D, Hd * I * K * 2)))
    w["rim.deform.off.b"] = p(bias.reshape(-1))
    w["rim.deform.att.w"] = p(np.zeros((2 * D, Hd * I * K)))
    w["rim.deform.att.b"] = p(np.zeros(Hd * I * K))
    bound = math.sqrt(6.0 / (4 * D)) / math.sqrt(Hd)
    w["rim.deform.out.w"] = p(rng.uniform(-bound, bound, (Hd, 2 * D, 2 * D)))
    w["rim.deform.out.b"] = p(np.zeros(2 * D))
    return w


def iam_weight(f: T.Tensor, weights, level: int) -> T.Tensor:
    """Channel gate ``sigmoid(conv1x1([avgpool(f), maxpool(f)]))``, shape ``1 x 1 x D``."""
    pooled = T.concat([T.pool2d(f, "avg"), T.pool2d(f, "max")], axis=-1)
    return T.sigmoid(T.conv2d(pooled, weights[f"rim.iam{level}.w"], weights[f"rim.iam{level}.b"]))


def iam_cross(fx: T.Tensor, fs: T.Tensor, weights, level: int, attn=None) -> tuple[T.Tensor, T.Tensor]:
    """Return ``(H_s, H_x)`` where each branch is gated by the other's attention.

    ``attn`` optionally overrides both gates (used to force 0 or 1 in tests).
    """
    if fx.shape != fs.shape:
        raise ShapeError(f"iam_cross: template {fx.shape} vs search {fs.shape}")
    if attn is None:
        ax, as_ = iam_weight(fx, weights, level), iam_weight(fs, weights, level)
    else:
        ax = as_ = T.as_tensor(np.broadcast_to(np.float32(attn), (1, 1, fx.shape[-1])))
    hs = ax * fs + fs
    hx = as_ * fx + fx
    return hs, hx


def top_down(fx_masked: T.Tensor, fs: T.Tensor, weights, cfg: RimConfig) -> list[tuple[T.Tensor, T.Tensor]]:
    """Multi-scale ``(H_s, H_x)`` pairs at resolutions H, H/2, H/4.

    The template input carries the occupancy mask as its last channel; the
    search branch gets a zero channel so both share the conv weights.
    """
    H, L, _ = fs.shape
    s = T.concat([fs, T.zeros((H, L, 1))], axis=-1)
    x = fx_masked
    if x.shape != s.shape:
        raise ShapeError(f"top_down: template {x.shape} vs padded search {s.shape}")
    pyramid = []
    for i in range(cfg.levels):
        stride = 1 if i == 0 else 2
        w, b = weights[f"rim.down{i}.w"], weights[f"rim.down{i}.b"]
        x = T.relu(T.conv2d(x, w, b, stride=stride, pad=1))
        s = T.relu(T.conv2d(s, w, b, stride=stride, pad=1))
        hs, hx = iam_cross(x, s, weights, i)
        pyramid.append((hs, hx))
        x, s = hx, hs
    return pyramid


def _reference_points(H: int, L: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(H), np.arange(L), indexing="ij")
    return np.stack([ii, jj], -1).reshape(-1, 2).astype(np.float32)


def deformable_aggregate(pyramid, weights, cfg: RimConfig, trace: dict | None = None) -> tuple[T.Tensor, T.Tensor]:
    """Aggregate the pyramid at level-0 queries and split into ``(F^x, F^s)``.

    Sampling offsets are in cells of the sampled level. Attention weights are
    softmax-normalised over all ``levels * points`` samples of a head.
    """
    Hd, K = cfg.heads, cfg.points
    I = len(pyramid)
    values = [T.concat([hs, hx], axis=-1) for hs, hx in pyramid]
    H, L, C2 = values[0].shape
    P = H * L
    q = values[0].reshape(P, C2)
    nI = cfg.levels
    off = T.linear(q, weights["rim.deform.off.w"], weights["rim.deform.off.b"]).reshape(P, Hd, nI, K, 2)
    logits = T.linear(q, weights["rim.deform.att.w"], weights["rim.deform.att.b"]).reshape(P, Hd, nI, K)
    logits = logits[:, :, :I].reshape(P, Hd, I * K)
    att = T.softmax(logits, axis=-1)
    if trace is not None:
        trace["attention"] = att.data
    att = att.reshape(P, Hd, I, K)

    ref = _reference_points(H, L)
    agg = None
    for lvl, val in enumerate(values):
        scale = 2 ** lvl
        ref_l = ((ref + 0.5) / scale - 0.5)[:, None, None, :]
        coords = (off[:, :, lvl] + ref_l).reshape(P * Hd * K, 2)
        if trace is not None:
            trace.setdefault("coords", []).append(coords.data.reshape(P, Hd, K, 2))
        samp = T.bilinear_sample(val, coords).reshape(P, Hd, K, C2)
        contrib = (samp * att[:, :, lvl].reshape(P, Hd, K, 1)).sum(axis=2)
        agg = contrib if agg is None else agg + contrib
    mixed = (agg.transpose(1, 0, 2) @ weights["rim.deform.out.w"]).sum(axis=0) + weights["rim.deform.out.b"]
    fs_hat, fx_hat = T.split(mixed.reshape(H, L, C2), [C2 // 2, C2 // 2], axis=-1)
    return fx_hat, fs_hat


def rim_forward(fx: T.Tensor, mask, fs: T.Tensor, weights, cfg: RimConfig,
                trace: dict | None = None) -> tuple[T.Tensor, T.Tensor]:
    fx_masked = T.concat([fx, T.as_tensor(mask)], axis=-1)
    pyramid = top_down(fx_masked, fs, weights, cfg)
    return deformable_aggregate(pyramid, weights, cfg, trace)
