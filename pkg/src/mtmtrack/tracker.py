"""Online tracking loop over a tracklet, seeded by the first-frame box only."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .bmp import bmp_forward
from .geometry import OrientedBox3D, track_to_world
from .pipeline import ModelConfig, predict_box
from .sim import Tracklet

MODES = ("full", "bmp")


@dataclass
class TrackerState:
    history: deque
    template: np.ndarray | None = None
    diagnostics: list = field(default_factory=list)

    @classmethod
    def seeded(cls, box: OrientedBox3D, maxlen: int, points: np.ndarray | None = None) -> TrackerState:
        return cls(deque([box], maxlen=maxlen), points)

    def push(self, box: OrientedBox3D, points: np.ndarray) -> None:
        self.history.append(box)
        self.template = points


def dead_reckon(history, weights, cfg: ModelConfig) -> OrientedBox3D:
    """Stage-I-only step: move the newest box by the coarse motion, keeping its yaw."""
    v = bmp_forward(list(history), weights, cfg.bmp)
    ref = history[-1]
    return track_to_world(OrientedBox3D((v.dx, v.dy, v.dz), ref.size, 0.0), ref)


def track_sequence(tracklet: Tracklet, weights, cfg: ModelConfig, *, mode: str = "full",
                   use_bmp_init: bool = True, history_len: int | None = None,
                   dump_iters: list | None = None) -> list[OrientedBox3D]:
    """Boxes for every frame of ``tracklet``.

    Ground truth is stripped before the loop; only frame 0's box seeds the
    tracker. ``history_len`` caps the buffer below the model's window (the
    rest is filled by repeating the oldest box). With ``dump_iters`` a list
    of the per-iteration motion maps is appended for each tracked frame.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    tr = tracklet.stripped()
    if not tr.frames or tr.frames[0].gt is None:
        raise ValueError("track_sequence needs a ground-truth box for the first frame")
    cap = cfg.bmp.history_len if history_len is None else min(history_len, cfg.bmp.history_len)
    if cap < 1:
        raise ValueError("history_len must be >= 1")
    seed = tr.frames[0].gt
    state = TrackerState.seeded(seed, cap, tr.frames[0].load_points() if len(tr) > 1 else None)
    out = [seed]
    for frame in tr.frames[1:]:
        search = frame.load_points()
        if mode == "bmp":
            box = dead_reckon(state.history, weights, cfg)
        else:
            box, diag, res = predict_box(list(state.history), state.template, search, weights, cfg,
                                         use_bmp_init=use_bmp_init, keep_snapshots=dump_iters is not None)
            state.diagnostics.append(diag)
            if dump_iters is not None:
                dump_iters.append(res.snapshots)
        state.push(box, search)
        out.append(box)
    return out
