"""Line-based trajectory files and on-disk tracklets.

Each line is ``frame_id cx cy cz l w h yaw`` with floats written to six
decimals. A tracklet directory holds ``gt.txt`` plus one velodyne ``.bin``
per frame under ``velodyne/``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np

from .bev import write_velodyne
from .geometry import OrientedBox3D
from .sim import Frame, Tracklet


class TrajectoryFormatError(ValueError):
    pass


def format_line(frame_id: int, box: OrientedBox3D) -> str:
    vals = (*box.center, *box.size, box.yaw)
    return f"{int(frame_id)} " + " ".join(f"{v:.6f}" for v in vals)


def dumps_trajectory(records: Iterable[tuple[int, OrientedBox3D]]) -> str:
    return "".join(format_line(fid, box) + "\n" for fid, box in records)


def loads_trajectory(text: str, source: str = "<string>") -> list[tuple[int, OrientedBox3D]]:
    out: list[tuple[int, OrientedBox3D]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TrajectoryFormatError(f"{source}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            fid = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError as e:
            raise TrajectoryFormatError(f"{source}:{lineno}: {e}") from None
        try:
            box = OrientedBox3D(vals[0:3], vals[3:6], vals[6])
        except ValueError as e:
            raise TrajectoryFormatError(f"{source}:{lineno}: {e}") from None
        if out and fid <= out[-1][0]:
            raise TrajectoryFormatError(f"{source}:{lineno}: frame ids must be strictly increasing")
        out.append((fid, box))
    return out


def write_trajectory(path, records: Iterable[tuple[int, OrientedBox3D]]) -> None:
    Path(path).write_text(dumps_trajectory(records))


def read_trajectory(path) -> list[tuple[int, OrientedBox3D]]:
    path = Path(path)
    return loads_trajectory(path.read_text(), str(path))


def write_tracklet(directory, tracklet: Tracklet) -> Path:
    d = Path(directory)
    (d / "velodyne").mkdir(parents=True, exist_ok=True)
    for f in tracklet.frames:
        write_velodyne(d / "velodyne" / f"{f.frame_id:06d}.bin", np.asarray(f.load_points())[:, :3])
    write_trajectory(d / "gt.txt", [(f.frame_id, f.gt) for f in tracklet.frames if f.gt is not None])
    return d


def read_tracklet(bin_dir, boxes_path) -> Tracklet:
    """Tracklet over the ``<frame_id>.bin`` scans in ``bin_dir`` with boxes from ``boxes_path``.

    Boxes may cover every frame (evaluation) or only the first (a seed box
    for tracking); frames without a box carry ``gt=None``.
    """
    bins = Path(bin_dir)
    gt = dict(read_trajectory(boxes_path))
    paths = {int(p.stem): p for p in bins.glob("*.bin") if p.stem.isdigit()}
    # a frame named by either source is kept, so a scan missing for a boxed frame fails loudly on load
    ids = sorted(set(paths) | set(gt))
    return Tracklet([Frame(fid, paths.get(fid, bins / f"{fid:06d}.bin"), gt.get(fid)) for fid in ids])


def load_tracklet_dir(directory) -> Tracklet:
    d = Path(directory)
    return read_tracklet(d / "velodyne", d / "gt.txt")
