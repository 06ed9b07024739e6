"""Watch the motion map converge over the refinement iterations for one frame pair.

Pass a weight file trained with the default configuration (for example
from ``mtmtrack train --out weights.bin``); without one, random weights
are used and the iterations barely move.
"""

import sys

import numpy as np

from mtmtrack.pipeline import ModelConfig, init_weights, predict_box
from mtmtrack.sim import SimSpec, simulate
from mtmtrack.weights_io import load_weights

cfg = ModelConfig()
weights = load_weights(sys.argv[1], requires_grad=False) if len(sys.argv) > 1 else init_weights(cfg, 0)
tr = simulate(SimSpec(speed=0.7, heading=0.5, frames=6, noise=0.02, seed=8))
history = tr.boxes[:5]
box, diag, out = predict_box(history, tr.frames[4].points, tr.frames[5].points, weights, cfg, keep_snapshots=True)

centre = tuple(np.array(cfg.region.bev_shape) // 2)
truth = np.hypot(*np.subtract(tr.boxes[5].center, tr.boxes[4].center)[:2])
print(f"true step length {truth:.3f} m; coarse motion {np.round(out.coarse.data[0], 3)}")
print(f"iter 0 (from stage one): {np.round(out.motion0.data[centre], 3)}")
for k, snap in enumerate(out.snapshots, 1):
    print(f"iter {k:2d}: {np.round(snap[centre], 3)}")
print(f"final centre error {np.linalg.norm(np.subtract(box.center, tr.boxes[5].center)):.3f} m, clamped={diag.clamped}")
