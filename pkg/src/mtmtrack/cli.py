"""Command-line entry points: simulate, train, track, eval, gradcheck, bench."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import Config, ConfigFileError, load_config
from .ope import evaluate_ope
from .sim import TRAJECTORY_KINDS, SimSpec, simulate
from .trajio import TrajectoryFormatError, load_tracklet_dir, read_tracklet, read_trajectory, write_tracklet, write_trajectory

log = logging.getLogger("mtmtrack")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="INI file with [region] [bmp] [rim] [irm] [train] sections")
    p.add_argument("--seed", type=_u64, default=0, help="random seed (unsigned 64-bit)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="mtmtrack", description="Two-stage motion-to-matching 3D single-object tracker")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write synthetic tracklets")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--kinds", default=",".join(TRAJECTORY_KINDS))
    p.add_argument("--per-kind", type=int, default=1)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--n-points", type=int, default=500)
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--yaw-rate", type=float, default=0.15)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--dropout", type=float, default=0.0)

    p = sub.add_parser("train", parents=[common], help="train on tracklet directories")
    p.add_argument("--data", type=Path, nargs="*", default=[],
                   help="tracklet directories (default: simulate the four-kind suite)")
    p.add_argument("--out", type=Path, required=True, help="output weight file")
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log-csv", type=Path)

    p = sub.add_parser("track", parents=[common], help="run the tracker and write a trajectory")
    p.add_argument("--weights", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--tracklet", type=Path, help="tracklet directory (gt.txt + velodyne/)")
    src.add_argument("--kitti-bin-dir", type=Path, help="directory of velodyne .bin scans")
    p.add_argument("--seed-boxes", type=Path, help="trajectory file with the first-frame box (with --kitti-bin-dir)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=("full", "bmp"), default="full")
    p.add_argument("--no-bmp-init", action="store_true")
    p.add_argument("--history-len", type=int)
    p.add_argument("--dump-iters", type=Path, help="write per-iteration motion maps, one record per frame")

    p = sub.add_parser("eval", parents=[common], help="OPE Success/Precision of a trajectory against ground truth")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--plot", type=Path, help="write the sweep curves as CSV")

    p = sub.add_parser("gradcheck", parents=[common], help="run the finite-difference gradient suite")
    p.add_argument("--max-checks", type=int, default=24)
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("bench", parents=[common], help="per-module forward timings")
    p.add_argument("--repeats", type=int, default=3)
    return ap


def _config(args) -> Config:
    return load_config(args.config) if args.config else Config()


def cmd_simulate(args, cfg: Config) -> int:
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    for k in kinds:
        if k not in TRAJECTORY_KINDS:
            raise SystemExit(f"unknown trajectory kind {k!r}; choose from {', '.join(TRAJECTORY_KINDS)}")
    n = 0
    for ki, kind in enumerate(kinds):
        for i in range(args.per_kind):
            spec = SimSpec(kind=kind, speed=args.speed, yaw_rate=args.yaw_rate, n_points=args.n_points,
                           noise=args.noise, dropout=args.dropout, frames=args.frames,
                           seed=(args.seed * 7919 + ki * 101 + i) % 2 ** 63)
            write_tracklet(args.out / f"{kind}_{i:02d}", simulate(spec))
            n += 1
    print(f"wrote {n} tracklets to {args.out}")
    return 0


def cmd_train(args, cfg: Config) -> int:
    from dataclasses import replace

    from .sim import suite
    from .train import TrainingDiverged, load_checkpoint, train
    from .weights_io import save_weights

    tcfg = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
    tracklets = [load_tracklet_dir(d) for d in args.data] if args.data else suite(seed=args.seed, per_kind=2)
    weights = state = None
    if args.resume:
        if args.checkpoint is None or not args.checkpoint.exists():
            raise SystemExit("--resume needs an existing --checkpoint")
        weights, state = load_checkpoint(args.checkpoint)
    rows = []

    def on_step(step, rec):
        rows.append(rec)
        if step % tcfg.log_every == 0:
            print(f"step {step:5d} total {rec['total']:.5f} kp {rec['kp']:.5f} mt {rec['mt']:.5f} reg {rec['reg']:.5f}",
                  flush=True)

    try:
        res = train(tracklets, cfg.model, tcfg, args.seed, weights=weights, state=state,
                    checkpoint=args.checkpoint, on_step=on_step)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    finally:
        if args.log_csv and rows:
            with open(args.log_csv, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]))
                w.writeheader()
                w.writerows(rows)
    save_weights(args.out, res.weights)
    print(f"wrote {args.out}")
    return 0


def cmd_track(args, cfg: Config) -> int:
    from .tracker import track_sequence
    from .weights_io import load_weights, save_records

    weights = load_weights(args.weights, requires_grad=False)
    if args.tracklet is not None:
        tracklet = load_tracklet_dir(args.tracklet)
    else:
        if args.seed_boxes is None:
            raise SystemExit("--kitti-bin-dir needs --seed-boxes")
        tracklet = read_tracklet(args.kitti_bin_dir, args.seed_boxes)
    dumps = [] if args.dump_iters is not None else None
    boxes = track_sequence(tracklet, weights, cfg.model, mode=args.mode, use_bmp_init=not args.no_bmp_init,
                           history_len=args.history_len, dump_iters=dumps)
    write_trajectory(args.out, [(f.frame_id, b) for f, b in zip(tracklet.frames, boxes)])
    if dumps is not None:
        save_records(args.dump_iters, [{f"iter{k:02d}": m for k, m in enumerate(snaps)} for snaps in dumps])
    print(f"wrote {len(boxes)} boxes to {args.out}")
    return 0


def cmd_eval(args, cfg: Config) -> int:
    pred = dict(read_trajectory(args.pred))
    gt = read_trajectory(args.gt)
    missing = [fid for fid, _ in gt if fid not in pred]
    if missing:
        raise SystemExit(f"prediction lacks frames {missing[:5]}{'...' if len(missing) > 5 else ''}")
    res = evaluate_ope([pred[fid] for fid, _ in gt], [b for _, b in gt])
    print(f"Success {res.success:.2f}  Precision {res.precision:.2f}  frames {len(gt)}")
    if args.plot:
        with open(args.plot, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["curve", "threshold", "fraction"])
            for name, (thr, frac) in res.curves().items():
                for a, b in zip(thr, frac):
                    w.writerow([name, f"{a:.2f}", f"{b:.6f}"])
    return 0


def cmd_gradcheck(args, cfg: Config) -> int:
    from .gradsuite import run_suite

    def show(r):
        if args.verbose or not r.passed:
            print(r)

    t0 = time.perf_counter()
    reports = run_suite(seeds=(args.seed, args.seed + 1, args.seed + 2), max_checks=args.max_checks, log=show)
    ok = sum(r.passed for r in reports)
    print(f"{ok}/{len(reports)} gradient checks passed in {time.perf_counter() - t0:.1f}s")
    return 0 if ok == len(reports) else 1


def cmd_bench(args, cfg: Config) -> int:
    from .bev import crop_region, encode_bev, template_mask, voxelize
    from .bmp import bmp_predict, history_offsets
    from .geometry import world_to_track
    from .irm import build_corr, init_motion, refine, regress_heads
    from .pipeline import init_weights
    from .rim import rim_forward

    m = cfg.model
    w = init_weights(m, args.seed)
    tr = simulate(SimSpec(frames=6, seed=args.seed, noise=0.02))
    hist = tr.boxes[:5]
    ref = hist[-1]
    stages = {}

    def timed(name, fn):
        best = np.inf
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            out = fn()
            best = min(best, time.perf_counter() - t0)
        stages[name] = best
        return out

    with T.no_grad():
        offs = history_offsets(hist, m.bmp.history_len)
        timed("bmp", lambda: bmp_predict(offs, w, m.bmp))
        vox_x = timed("voxelize", lambda: voxelize(crop_region(tr.frames[4].points, ref, m.region), m.region))
        vox_s = voxelize(crop_region(tr.frames[5].points, ref, m.region), m.region)
        fx = timed("bev_encode", lambda: encode_bev(vox_x, w, m.region))
        fs = encode_bev(vox_s, w, m.region)
        mask = template_mask(world_to_track(ref, ref), m.region)
        fx_hat, fs_hat = timed("rim", lambda: rim_forward(fx, mask, fs, w, m.rim))
        corr = timed("build_corr", lambda: build_corr(fx_hat, fs_hat, m.irm.scale_corr))
        m0 = init_motion(np.zeros(3), m.region.bev_shape)
        timed("refine", lambda: refine(m0, corr, w, m.irm, m.region.cell_size))
        timed("heads", lambda: regress_heads(fs_hat, w))
    H, L = m.region.bev_shape
    print(f"grid {H}x{L}, D={m.channels}, N={m.irm.iterations} (best of {args.repeats})")
    for k, v in stages.items():
        print(f"  {k:<12s} {v * 1e3:9.2f} ms")
    print(f"  {'total':<12s} {sum(stages.values()) * 1e3:9.2f} ms")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigFileError, TrajectoryFormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
