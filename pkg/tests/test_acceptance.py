"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4 to 6 use the session-scoped ``trained`` fixture (default model
and training configuration, 500 steps on the four-kind suite), which is
trained once per source revision and cached.
"""

import time

import numpy as np
import pytest

from mtmtrack import tensor as T
from mtmtrack.bev import FormatError, RegionSpec, read_velodyne, voxelize
from mtmtrack.bmp import BmpConfig, bmp_forward, bmp_predict, init_bmp_weights
from mtmtrack.geometry import OrientedBox3D, iou3d, points_in_box, track_to_world, world_to_track
from mtmtrack.gradsuite import run_suite
from mtmtrack.irm import IrmConfig, build_corr, init_irm_weights, init_motion, refine
from mtmtrack.ope import DIST_THRESHOLDS, IOU_THRESHOLDS, evaluate_ope, mean_result, precision_curve, success_curve
from mtmtrack.pipeline import ModelConfig, init_weights
from mtmtrack.rim import RimConfig, init_rim_weights, rim_forward
from mtmtrack.sim import SimSpec, simulate, suite
from mtmtrack.tracker import dead_reckon, track_sequence
from mtmtrack.train import TrainConfig, mean_probe_loss, probe_samples, train
from mtmtrack.trajio import dumps_trajectory, loads_trajectory
from mtmtrack.weights_io import dump_weights, load_weights_bytes

HELD_OUT_SEED = 7


def final_error(pred, gt) -> float:
    return float(np.linalg.norm(np.subtract(pred[-1].center, gt[-1].center)))


@pytest.fixture(scope="module")
def held_out():
    """Four tracklets, one per trajectory kind, never seen in training."""
    return suite(seed=HELD_OUT_SEED, per_kind=1)


def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    reports = run_suite(seeds=(0, 1, 2), rel_tol=1e-3)
    elapsed = time.perf_counter() - t0
    failed = [r.op_name for r in reports if not r.passed]
    worst = max(r.max_rel_err for r in reports)
    verdict(1, not failed and elapsed < 120.0,
            f"{len(reports) - len(failed)}/{len(reports)} checks pass (worst rel err {worst:.1e}) in {elapsed:.1f}s"
            + (f"; failed {failed}" if failed else ""))


def _mc_iou(a, b, n, rng):
    def inside_fraction(src, other):
        local = (rng.random((n, 3)) - 0.5) * np.array(src.size)
        return points_in_box(track_to_world(local, src), other).mean()

    inter = 0.5 * (inside_fraction(a, b) * a.volume() + inside_fraction(b, a) * b.volume())
    return inter / (a.volume() + b.volume() - inter)


def test_criterion_2_oracle_equivalences(verdict):
    rng = np.random.default_rng(2)
    fx, fs = rng.normal(size=(8, 8, 16)), rng.normal(size=(8, 8, 16))
    W = build_corr(T.Tensor(fx), T.Tensor(fs)).data
    brute = np.zeros((8, 8, 8, 8))
    for i in range(8):
        for j in range(8):
            for k in range(8):
                for m in range(8):
                    brute[i, j, k, m] = sum(fx[i, j, c] * fs[k, m, c] for c in range(16)) / 4.0
    corr_err = float(np.abs(W - brute).max())

    axis_cases = [
        (OrientedBox3D((0, 0, 0), (2, 2, 2)), OrientedBox3D((0, 0, 0), (2, 2, 2)), 1.0),
        (OrientedBox3D((0, 0, 0), (2, 2, 2)), OrientedBox3D((1, 0, 0), (2, 2, 2)), 4 / 12),
        (OrientedBox3D((0, 0, 0), (2, 2, 2)), OrientedBox3D((0, 0, 0), (1, 1, 1)), 1 / 8),
        (OrientedBox3D((0, 0, 0), (2, 2, 2)), OrientedBox3D((3, 0, 0), (2, 2, 2)), 0.0),
        (OrientedBox3D((0, 0, 0), (4, 2, 1)), OrientedBox3D((0, 0, 0), (4, 2, 1), np.pi), 1.0),
    ]
    axis_ok = all(iou3d(a, b) == pytest.approx(v, abs=1e-12) for a, b, v in axis_cases)

    mc_err = 0.0
    for _ in range(20):
        a = OrientedBox3D(rng.normal(0, 0.3, 3), rng.uniform(0.8, 2.0, 3), rng.uniform(-np.pi, np.pi))
        b = OrientedBox3D(np.add(a.center, rng.normal(0, 0.4, 3)), rng.uniform(0.8, 2.0, 3), rng.uniform(-np.pi, np.pi))
        mc_err = max(mc_err, abs(iou3d(a, b) - _mc_iou(a, b, 10 ** 6, rng)))

    ope_ok = True
    for _ in range(20):
        n = int(rng.integers(1, 30))
        gt = [OrientedBox3D(rng.normal(size=3), rng.uniform(0.5, 2, 3), rng.uniform(-3, 3)) for _ in range(n)]
        pred = [g.replace(center=np.add(g.center, rng.normal(0, 0.6, 3))) for g in gt]
        r = evaluate_ope(pred, gt)
        ope_ok &= list(success_curve(r.ious)) == [sum(v > t for v in r.ious) / n for t in IOU_THRESHOLDS]
        ope_ok &= list(precision_curve(r.errors)) == [sum(e < d for e in r.errors) / n for d in DIST_THRESHOLDS]

    verdict(2, corr_err < 1e-4 and axis_ok and mc_err < 1e-2 and ope_ok,
            f"corr max err {corr_err:.1e}; axis-aligned IoU exact {axis_ok}; "
            f"Monte-Carlo IoU max err {mc_err:.4f} over 20 pairs; OPE curves match counting {ope_ok}")


def test_criterion_3_structural_invariants(verdict, tiny_cfg):
    rng = np.random.default_rng(3)
    checks = {}

    bcfg = BmpConfig()
    bw = init_bmp_weights(bcfg, rng)
    trace = []
    bmp_predict(rng.normal(size=(3, 4, 27)), bw, bcfg, trace=trace)
    rcfg = RimConfig()
    rw = init_rim_weights(rcfg, rng)
    rw["rim.deform.att.w"].data[:] = rng.normal(size=rw["rim.deform.att.w"].shape)
    rtrace = {}
    rim_forward(T.Tensor(rng.normal(size=(32, 32, 16))), np.zeros((32, 32, 1)),
                T.Tensor(rng.normal(size=(32, 32, 16))), rw, rcfg, rtrace)
    dev = max(float(np.abs(a.sum(-1) - 1).max()) for a in trace + [rtrace["attention"]])
    checks["attention rows sum to 1"] = dev <= 1e-6

    icfg = IrmConfig(hidden=16)
    iw = init_irm_weights(icfg, rng)
    iw["irm.out.w"].data[:] = 0.0
    iw["irm.out.b"].data[:] = 0.0
    corr = build_corr(T.Tensor(rng.normal(size=(12, 12, 8))), T.Tensor(rng.normal(size=(12, 12, 8))))
    m0 = T.Tensor(rng.normal(size=(12, 12, 2)))
    checks["zeroed update head is identity"] = all(
        refine(m0, corr, iw, IrmConfig(iterations=n, hidden=16), (0.1, 0.1)).data.tobytes() == m0.data.tobytes()
        for n in (1, 3, 10))

    m = init_motion(np.array([0.5, -0.25, 0.1]), (64, 64)).data
    checks["init_motion constant field"] = bool(np.all(m[..., 0] == 0.5) and np.all(m[..., 1] == -0.25))

    hist = [OrientedBox3D((0.7 * t, 0.2 * t, 0.0), (3.6, 1.8, 1.6), 0.28) for t in range(5)]
    base = bmp_forward(hist, bw, bcfg).as_array()
    moved = [b.replace(center=np.add(b.center, (123.4, -56.7, 2.5))) for b in hist]
    checks["BMP translation invariant"] = bool(np.allclose(bmp_forward(moved, bw, bcfg).as_array(), base, atol=1e-4))

    spec = RegionSpec()
    pts = rng.uniform(-3, 3, size=(2000, 3)) * [1, 1, 0.6]
    checks["voxelize permutation invariant"] = np.array_equal(voxelize(pts, spec), voxelize(pts[rng.permutation(2000)], spec))

    tr = suite(seed=11, frames=4, n_points=150)
    fast = TrainConfig(steps=3, bmp_batch=4, pairs_per_step=1)
    a, b = train(tr, tiny_cfg, fast, seed=9), train(tr, tiny_cfg, fast, seed=9)
    same_w = all(a.weights[k].data.tobytes() == b.weights[k].data.tobytes() for k in a.weights)
    same_sim = simulate(SimSpec(noise=0.05, dropout=0.2, seed=5)).frames[3].points.tobytes() == \
        simulate(SimSpec(noise=0.05, dropout=0.2, seed=5)).frames[3].points.tobytes()
    same_track = track_sequence(tr[0], a.weights, tiny_cfg) == track_sequence(tr[0], b.weights, tiny_cfg)
    checks["seeded runs bit-reproducible"] = same_w and same_sim and same_track and a.history == b.history

    failed = [k for k, v in checks.items() if not v]
    verdict(3, not failed, f"{len(checks) - len(failed)}/{len(checks)} invariants hold (max attention deviation {dev:.1e})"
            + (f"; broken: {failed}" if failed else ""))


def cv_bmp_error(weights, bcfg) -> np.ndarray:
    """Largest per-axis error of the coarse motion on noise-free constant-velocity histories."""
    worst = np.zeros(3)
    for speed in (0.3, 0.6, 1.0, 1.2):
        for heading in (0.0, 0.9, -2.5):
            boxes = simulate(SimSpec(speed=speed, heading=heading, frames=6, n_points=0)).boxes
            v = bmp_forward(boxes[:5], weights, bcfg).as_array()
            truth = world_to_track(boxes[5], boxes[4]).center
            worst = np.maximum(worst, np.abs(v - truth))
    return worst


def test_criterion_4_toy_scale_learning(verdict, trained, held_out):
    meta = trained.meta
    ratio = meta["final_augmented"]["total"] / meta["initial_augmented"]["total"]
    bmp_err = cv_bmp_error(trained.weights, trained.mcfg.bmp)
    static = bmp_forward([OrientedBox3D((4.0, -2.0, 0.3), (1.8, 0.9, 1.6), 1.1)] * 5,
                         trained.weights, trained.mcfg.bmp).as_array()
    probes = probe_samples(held_out, trained.mcfg, trained.tcfg, HELD_OUT_SEED, 24, augment=False)
    res = mean_probe_loss(trained.weights, probes, trained.mcfg)
    ok = (ratio < 0.1 and bmp_err.max() < 0.05 and np.linalg.norm(static) < 0.1
          and res["motion_err"] < res["motion0_err"] and meta["train_seconds"] < 1800)
    verdict(4, ok,
            f"loss {meta['initial_augmented']['total']:.3f} -> {meta['final_augmented']['total']:.3f} "
            f"(ratio {ratio:.3f}; clean probes {meta['initial_clean']['total']:.3f} -> {meta['final_clean']['total']:.3f}); "
            f"BMP constant-velocity max err per axis {np.round(bmp_err, 3).tolist()}, static |V| {np.linalg.norm(static):.3f}; "
            f"held-out |M^N-gt| {res['motion_err']:.3f} vs |M^0-gt| {res['motion0_err']:.3f}; "
            f"trained in {meta['train_seconds'] / 60:.1f} min")


def test_criterion_5_end_to_end_tracking(verdict, trained):
    w, cfg = trained.weights, trained.mcfg
    cv = simulate(SimSpec(speed=1.0, heading=0.4, frames=20, noise=0.02, dropout=0.1, seed=9001))
    r = evaluate_ope(track_sequence(cv, w, cfg), cv.boxes)
    static = simulate(SimSpec(speed=0.0, frames=20, noise=0.02, dropout=0.1, seed=9002, heading=-0.7))
    static_err = final_error(track_sequence(static, w, cfg), static.boxes)
    turn = simulate(SimSpec(kind="turn", speed=0.8, yaw_rate=0.15, frames=20, noise=0.02, dropout=0.1, seed=9003))
    full_err = final_error(track_sequence(turn, w, cfg), turn.boxes)
    bmp_err = final_error(track_sequence(turn, w, cfg, mode="bmp"), turn.boxes)
    # from a single seed box dead reckoning never starts moving; also give it a full ground-truth history
    n = cfg.bmp.history_len
    warm = list(turn.boxes[:n])
    while len(warm) < len(turn.boxes):
        warm.append(dead_reckon(warm[-n:], w, cfg))
    warm_err = final_error(warm, turn.boxes)
    ok = r.success >= 60 and r.precision >= 80 and static_err < 0.2 and full_err < min(bmp_err, warm_err)
    verdict(5, ok, f"constant-velocity Success {r.success:.1f} Precision {r.precision:.1f}; "
                   f"static final error {static_err:.3f} m; turn final error full {full_err:.3f} m vs BMP-only {bmp_err:.3f} m "
                   f"({warm_err:.3f} m with {n} ground-truth boxes to start)")


def test_criterion_6_ablation_directionality(verdict, trained, held_out):
    w, cfg = trained.weights, trained.mcfg

    def mean_success(**kw):
        return mean_result([evaluate_ope(track_sequence(t, w, cfg, **kw), t.boxes) for t in held_out])[0]

    full = mean_success()
    zero_init = mean_success(use_bmp_init=False)
    short = mean_success(history_len=2)
    verdict(6, zero_init < full and full >= short,
            f"mean Success with BMP init {full:.1f} vs zero M^0 {zero_init:.1f}; "
            f"history 5 {full:.1f} vs history 2 {short:.1f}")


def test_criterion_7_format_round_trips(verdict, tmp_path):
    w = init_weights(ModelConfig(), 5)
    blob = dump_weights(w)
    back = load_weights_bytes(blob)
    weights_ok = dump_weights(back) == blob and all(back[k].data.tobytes() == w[k].data.tobytes() for k in w)

    rng = np.random.default_rng(7)
    recs = [(i, OrientedBox3D(rng.normal(0, 50, 3), rng.uniform(0.1, 5, 3), rng.uniform(-3, 3))) for i in range(30)]
    text = dumps_trajectory(recs)
    traj_ok = dumps_trajectory(loads_trajectory(text)) == text

    bad = tmp_path / "000000.bin"
    bad.write_bytes(b"\0" * 36)
    try:
        read_velodyne(bad)
        bin_ok = False
    except FormatError as e:
        bin_ok = "16" in str(e)
    verdict(7, weights_ok and traj_ok and bin_ok,
            f"weights bit-exact {weights_ok}; trajectory text bit-exact {traj_ok}; 36-byte scan rejected {bin_ok}")
