"""Track two held-out targets with the two-stage tracker and its ablations.

    python demos/02_train_and_track.py weights.bin   # default model, e.g. from `mtmtrack train`
    python demos/02_train_and_track.py               # train a reduced model for ~2 minutes first

The reduced model (32 x 32 grid at 0.2 m) only shows the loss going down;
300 steps are not enough for its refinement stage to track, so expect low
scores from it. Stage-one dead reckoning predicts no motion from the single
seed box and then sees a static history, so it stays put; on the turn it
would also keep the initial heading.
"""

import sys
import time

from mtmtrack.bev import RegionSpec
from mtmtrack.irm import IrmConfig
from mtmtrack.ope import evaluate_ope
from mtmtrack.pipeline import ModelConfig
from mtmtrack.sim import SimSpec, simulate, suite
from mtmtrack.tracker import track_sequence
from mtmtrack.train import TrainConfig, train
from mtmtrack.weights_io import load_weights

if len(sys.argv) > 1:
    mcfg = ModelConfig()
    weights = load_weights(sys.argv[1], requires_grad=False)
else:
    mcfg = ModelConfig(region=RegionSpec(voxel_size=(0.2, 0.2, 0.2)), irm=IrmConfig(iterations=6, radius=3, hidden=32))
    t0 = time.perf_counter()
    res = train(suite(seed=0, per_kind=2), mcfg, TrainConfig(steps=300), seed=0,
                on_step=lambda s, rec: s % 25 == 0 and print(f"step {s:4d}  loss {rec['total']:.3f}", flush=True))
    print(f"trained in {time.perf_counter() - t0:.0f}s (reduced model)")
    weights = res.weights

targets = {
    "straight": simulate(SimSpec(speed=0.9, heading=0.5, frames=20, noise=0.02, dropout=0.1, seed=41)),
    "turn": simulate(SimSpec(kind="turn", speed=0.8, yaw_rate=0.12, frames=20, noise=0.02, dropout=0.1, seed=42)),
}
for name, target in targets.items():
    print(name)
    for label, kw in (("two-stage", {}), ("stage one only", {"mode": "bmp"}), ("zero initial motion", {"use_bmp_init": False})):
        r = evaluate_ope(track_sequence(target, weights, mcfg, **kw), target.boxes)
        print(f"{label:>20s}: Success {r.success:5.1f}  Precision {r.precision:5.1f}")
