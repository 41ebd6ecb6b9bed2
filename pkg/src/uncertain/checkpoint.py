"""Bit-exact binary checkpoints for named parameter arrays.

Layout (all little-endian):

    magic "UNCK" | u32 version | u64 entry count
    per entry: u32 name length | name utf-8 | u32 rank | u64 * rank extents
               | float64 * prod(extents) payload, C order

Entries are written in sorted name order, so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"UNCK"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(arrays)))
        for name in sorted(arrays):
            values = np.asarray(arrays[name], dtype=np.float64)
            if values.ndim and not values.flags["C_CONTIGUOUS"]:
                values = np.ascontiguousarray(values)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", values.ndim))
            fh.write(struct.pack(f"<{values.ndim}Q", *values.shape))
            fh.write(values.tobytes(order="C"))


def _read(fh, size, what):
    chunk = fh.read(size)
    if len(chunk) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return chunk


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, count = struct.unpack("<IQ", _read(fh, 12, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read(fh, 4, "name length"))
            name = _read(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank, "shape"))
            size = int(np.prod(shape)) if rank else 1
            payload = _read(fh, 8 * size, f"payload of {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after last checkpoint entry")
    return arrays
