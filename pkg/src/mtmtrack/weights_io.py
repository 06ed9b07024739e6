"""Binary weight files.

Layout (little-endian): ``u32`` entry count, then per entry ``u32`` name
length, UTF-8 name, ``u32`` rank, ``rank`` x ``u32`` extents and the raw
float32 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor


class WeightFormatError(ValueError):
    pass


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float32)


def dump_weights(weights: Mapping[str, object]) -> bytes:
    parts = [struct.pack("<I", len(weights))]
    for name, value in weights.items():
        arr = np.asarray(_as_array(value), dtype="<f4", order="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_weights_bytes(buf: bytes) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFormatError(f"truncated weight file at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        if name in out:
            raise WeightFormatError(f"duplicate entry {name!r}")
        out[name] = arr
    if pos != len(buf):
        raise WeightFormatError(f"{len(buf) - pos} trailing bytes after {count} entries")
    return out


def save_weights(path, weights: Mapping[str, object]) -> None:
    Path(path).write_bytes(dump_weights(weights))


def load_weights(path, requires_grad: bool = True) -> dict[str, Tensor]:
    arrays = load_weights_bytes(Path(path).read_bytes())
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


def save_records(path, records: list[Mapping[str, object]]) -> None:
    """Write several weight-format blocks back to back (used for diagnostics dumps)."""
    with open(path, "wb") as fh:
        for rec in records:
            fh.write(dump_weights(rec))


def load_records(path) -> list[dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    records, pos = [], 0
    while pos < len(buf):
        end = _block_end(buf, pos)
        records.append(load_weights_bytes(buf[pos:end]))
        pos = end
    return records


def _block_end(buf: bytes, pos: int) -> int:
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4 + nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        shape = struct.unpack_from(f"<{rank}I", buf, pos + 4)
        pos += 4 + 4 * rank + 4 * (int(np.prod(shape)) if rank else 1)
    return pos
