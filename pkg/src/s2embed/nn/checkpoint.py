"""Named-tensor checkpoint files.

Little-endian layout: magic "S2VP", u16 version=1, u32 tensor count;
then per tensor: u16 name length, UTF-8 name, u8 rank, u32 extents,
float32 data in row-major order. Tensors are written sorted by name so
identical contents always produce identical bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"S2VP"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(tensors)))
        for name in sorted(tensors):
            array = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"tensor name too long: {name[:40]!r}...")
            if array.ndim > 0xFF:
                raise ValueError(f"tensor rank {array.ndim} too large")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(array.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<HI", fh.read(6))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(size * 4), dtype="<f4")
            out[name] = data.reshape(shape).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return out
