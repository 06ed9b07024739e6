"""Stage I: transformer encoder-decoder over historical box keypoint offsets.

History boxes are first expressed in the frame of the newest box, so the
predicted motion is already in the coordinates used by the second stage.
All functions accept a leading batch axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import (
    KEYPOINT_DIM,
    NUM_KEYPOINTS,
    InsufficientHistoryError,
    OrientedBox3D,
    keypoints_of_box,
    offsets_of_history,
    world_to_track,
)

KP_FEATURES = NUM_KEYPOINTS * KEYPOINT_DIM


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BmpConfig:
    history_len: int = 5
    token_dim: int = 128
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 256

    def __post_init__(self):
        if self.history_len < 2:
            raise ConfigError("history_len must be >= 2")
        if self.token_dim % self.heads:
            raise ConfigError("token_dim must be divisible by heads")
        if self.token_dim % 2:
            raise ConfigError("token_dim must be even for the sinusoidal encoding")


@dataclass(frozen=True)
class CoarseMotion:
    dx: float
    dy: float
    dz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])


# -- parameters -----------------------------------------------------------------


def _xavier(shape, rng):
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def _attention_block(prefix: str, cfg: BmpConfig, rng) -> dict[str, T.Tensor]:
    D, F = cfg.token_dim, cfg.ffn_dim
    p = T.parameter
    return {
        f"{prefix}.wq": p(_xavier((D, D), rng)),
        f"{prefix}.wk": p(_xavier((D, D), rng)),
        f"{prefix}.wv": p(_xavier((D, D), rng)),
        f"{prefix}.wo": p(_xavier((D, D), rng)),
        f"{prefix}.bo": p(np.zeros(D)),
        f"{prefix}.ln1.g": p(np.ones(D)),
        f"{prefix}.ln1.b": p(np.zeros(D)),
        f"{prefix}.ffn.w1": p(_xavier((D, F), rng)),
        f"{prefix}.ffn.b1": p(np.zeros(F)),
        f"{prefix}.ffn.w2": p(_xavier((F, D), rng)),
        f"{prefix}.ffn.b2": p(np.zeros(D)),
        f"{prefix}.ln2.g": p(np.ones(D)),
        f"{prefix}.ln2.b": p(np.zeros(D)),
    }


def init_bmp_weights(cfg: BmpConfig, rng: np.random.Generator) -> dict[str, T.Tensor]:
    D = cfg.token_dim
    w = {
        "bmp.embed.w": T.parameter(_xavier((KP_FEATURES, D), rng)),
        "bmp.embed.b": T.parameter(np.zeros(D)),
        "bmp.head.w": T.parameter(_xavier((D, KP_FEATURES), rng) * 0.1),
        "bmp.head.b": T.parameter(np.zeros(KP_FEATURES)),
    }
    for i in range(cfg.encoder_layers):
        w.update(_attention_block(f"bmp.enc{i}", cfg, rng))
    for i in range(cfg.decoder_layers):
        w.update(_attention_block(f"bmp.dec{i}", cfg, rng))
    return w


# -- building blocks ---------------------------------------------------------------


def sinusoidal_encoding(n: int, dim: int, start: int = 0) -> np.ndarray:
    pos = np.arange(start, start + n, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, dim, 2) / dim)
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe.astype(np.float32)


def embed_offsets(offsets, weights, cfg: BmpConfig, start: int = 0, positional: bool = True,
                  expected_len: int | None = None) -> T.Tensor:
    """Project ``(B, n, 27)`` offsets to ``(B, n, D)`` tokens plus position codes."""
    x = T.as_tensor(offsets)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if x.shape[-1] != KP_FEATURES:
        raise ConfigError(f"offset tokens must have {KP_FEATURES} features, got {x.shape[-1]}")
    if expected_len is not None and x.shape[1] != expected_len:
        raise ConfigError(f"expected {expected_len} offset tokens, got {x.shape[1]}")
    tok = T.linear(x, weights["bmp.embed.w"], weights["bmp.embed.b"])
    if positional:
        tok = tok + sinusoidal_encoding(x.shape[1], cfg.token_dim, start)
    return tok


def multi_head_attention(q: T.Tensor, k: T.Tensor, v: T.Tensor, heads: int, trace: list | None = None) -> T.Tensor:
    B, nq, D = q.shape
    nk = k.shape[1]
    d = D // heads
    qh = q.reshape(B, nq, heads, d).transpose(0, 2, 1, 3)
    kh = k.reshape(B, nk, heads, d).transpose(0, 2, 3, 1)
    vh = v.reshape(B, nk, heads, d).transpose(0, 2, 1, 3)
    att = T.softmax((qh @ kh) * (1.0 / math.sqrt(d)), axis=-1)
    if trace is not None:
        trace.append(att.data)
    return (att @ vh).transpose(0, 2, 1, 3).reshape(B, nq, D)


def attention_layer(x_q: T.Tensor, x_kv: T.Tensor, weights, prefix: str, cfg: BmpConfig,
                    trace: list | None = None) -> T.Tensor:
    """Post-norm block: LN(MHA(Q, K, V) + Q), then LN(FFN(.) + .). The residual is the projected query."""
    w = weights
    q = x_q @ w[f"{prefix}.wq"]
    k = x_kv @ w[f"{prefix}.wk"]
    v = x_kv @ w[f"{prefix}.wv"]
    att = T.linear(multi_head_attention(q, k, v, cfg.heads, trace), w[f"{prefix}.wo"], w[f"{prefix}.bo"])
    h = T.layer_norm(att + q, w[f"{prefix}.ln1.g"], w[f"{prefix}.ln1.b"])
    ff = T.linear(T.relu(T.linear(h, w[f"{prefix}.ffn.w1"], w[f"{prefix}.ffn.b1"])),
                  w[f"{prefix}.ffn.w2"], w[f"{prefix}.ffn.b2"])
    return T.layer_norm(ff + h, w[f"{prefix}.ln2.g"], w[f"{prefix}.ln2.b"])


def encode(tokens: T.Tensor, weights, cfg: BmpConfig, trace: list | None = None) -> T.Tensor:
    x = tokens
    for i in range(cfg.encoder_layers):
        x = attention_layer(x, x, weights, f"bmp.enc{i}", cfg, trace)
    return x


def decode(latest: T.Tensor, memory: T.Tensor, weights, cfg: BmpConfig, trace: list | None = None) -> T.Tensor:
    """Cross-attend the latest-offset token to the encoded history; returns ``(B, 27)`` offsets."""
    x = latest
    for i in range(cfg.decoder_layers):
        x = attention_layer(x, memory, weights, f"bmp.dec{i}", cfg, trace)
    out = T.linear(x, weights["bmp.head.w"], weights["bmp.head.b"])
    return out.reshape(out.shape[0], KP_FEATURES)


def keypoint_mean(pred: T.Tensor) -> T.Tensor:
    """Average predicted keypoint offsets per axis: ``(B, 27) -> (B, 3)``."""
    return pred.reshape(pred.shape[0], NUM_KEYPOINTS, KEYPOINT_DIM).mean(axis=1)


def coarse_motion(pred_offsets) -> CoarseMotion:
    arr = pred_offsets.data if isinstance(pred_offsets, T.Tensor) else np.asarray(pred_offsets)
    if arr.size != KP_FEATURES:
        raise ConfigError(f"expected {KP_FEATURES} offsets, got {arr.size}")
    m = arr.reshape(NUM_KEYPOINTS, KEYPOINT_DIM).astype(np.float64).mean(axis=0)
    return CoarseMotion(*map(float, m))


# -- history handling ------------------------------------------------------------------


def pad_history(history: Sequence[OrientedBox3D], n: int) -> list[OrientedBox3D]:
    """Keep the newest ``n`` boxes, repeating the oldest when fewer are known."""
    if len(history) == 0:
        raise InsufficientHistoryError("history is empty")
    hist = list(history)[-n:]
    return [hist[0]] * (n - len(hist)) + hist


def history_offsets(history: Sequence[OrientedBox3D], n: int) -> np.ndarray:
    """Offsets of the padded history in the newest box's frame, ``(n-1, 27)``."""
    hist = pad_history(history, n)
    ref = hist[-1]
    return offsets_of_history([world_to_track(b, ref) for b in hist]).astype(np.float32)


def forward_offsets(prev: OrientedBox3D, cur: OrientedBox3D, ref: OrientedBox3D | None = None) -> np.ndarray:
    """Training target: keypoint displacement ``C_t - C_{t-1}`` in the frame of ``ref`` (default ``prev``)."""
    ref = prev if ref is None else ref
    a = keypoints_of_box(world_to_track(prev, ref))
    b = keypoints_of_box(world_to_track(cur, ref))
    return (b - a).reshape(-1).astype(np.float32)


def bmp_predict(offsets: np.ndarray, weights, cfg: BmpConfig, positional: bool = True,
                trace: list | None = None) -> T.Tensor:
    """Predicted forward keypoint offsets ``(B, 27)`` from ``(B, N-1, 27)`` history offsets."""
    offsets = np.asarray(offsets, dtype=np.float32)
    if offsets.ndim == 2:
        offsets = offsets[None]
    n = offsets.shape[1]
    tokens = embed_offsets(offsets, weights, cfg, positional=positional)
    memory = encode(tokens, weights, cfg, trace)
    latest = embed_offsets(offsets[:, -1:], weights, cfg, start=n, positional=positional)
    return decode(latest, memory, weights, cfg, trace)


def bmp_forward(history: Sequence[OrientedBox3D], weights, cfg: BmpConfig) -> CoarseMotion:
    """Coarse target motion from frame t-1 to t, in the frame of the newest history box."""
    with T.no_grad():
        pred = bmp_predict(history_offsets(history, cfg.history_len), weights, cfg)
    return coarse_motion(pred.data[0])
