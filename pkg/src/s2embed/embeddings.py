"""Persisted per-cell embedding tables.

Binary layout (little-endian): magic "S2VE", u16 version=1, u32 dim,
u64 count; then per entry a u64 cell raw id followed by dim float32
values. Entries are sorted by raw id, so identical contents always
serialize to identical bytes. Provenance (the config and checkpoint
hashes an extraction ran under) travels in a JSON sidecar next to the
binary file, since the binary format itself has no provenance field.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .s2geom import CellId

MAGIC = b"S2VE"
VERSION = 1


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".meta.json")


@dataclass
class EmbeddingTable:
    """Map from cell raw id to a fixed-length float32 vector."""

    entries: dict[int, np.ndarray]
    dim: int
    config_hash: str | None = field(default=None)
    checkpoint_hash: str | None = field(default=None)

    def __post_init__(self) -> None:
        for raw, vec in self.entries.items():
            CellId(raw)
            if vec.shape != (self.dim,):
                raise ValueError(
                    f"entry {raw:#x} has length {vec.shape}, expected ({self.dim},)")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, raw: int) -> bool:
        return raw in self.entries

    def get(self, cell: CellId | int | str) -> np.ndarray:
        if isinstance(cell, str):
            raw = CellId.from_token(cell).raw
        elif isinstance(cell, CellId):
            raw = cell.raw
        else:
            raw = cell
        return self.entries[raw]

    def matrix(self, cells: Iterable[CellId | int | str]) -> np.ndarray:
        """Stack vectors for the given cells, in the given order."""
        return np.stack([self.get(c) for c in cells])

    @classmethod
    def from_vectors(cls, ids: Iterable[int], vectors: np.ndarray,
                     config_hash: str | None = None,
                     checkpoint_hash: str | None = None) -> "EmbeddingTable":
        vectors = np.asarray(vectors, dtype=np.float32)
        entries = {raw: vectors[i] for i, raw in enumerate(ids)}
        if len(entries) != vectors.shape[0]:
            raise ValueError("duplicate cell ids in embedding input")
        return cls(entries=entries, dim=vectors.shape[1],
                   config_hash=config_hash, checkpoint_hash=checkpoint_hash)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HIQ", VERSION, self.dim, len(self.entries)))
            for raw in sorted(self.entries):
                fh.write(struct.pack("<Q", raw))
                fh.write(np.ascontiguousarray(self.entries[raw],
                                              dtype="<f4").tobytes())
        meta: dict[str, object] = {"dim": self.dim, "count": len(self.entries)}
        if self.config_hash is not None:
            meta["config_hash"] = self.config_hash
        if self.checkpoint_hash is not None:
            meta["checkpoint_hash"] = self.checkpoint_hash
        sidecar_path(path).write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        with open(path, "rb") as fh:
            if fh.read(4) != MAGIC:
                raise ValueError(f"{path}: not an embedding table file")
            version, dim, count = struct.unpack("<HIQ", fh.read(14))
            if version != VERSION:
                raise ValueError(f"{path}: unsupported version {version}")
            entries: dict[int, np.ndarray] = {}
            row_bytes = 8 + dim * 4
            for _ in range(count):
                blob = fh.read(row_bytes)
                if len(blob) != row_bytes:
                    raise ValueError(f"{path}: truncated entry")
                (raw,) = struct.unpack_from("<Q", blob)
                entries[raw] = np.frombuffer(blob, dtype="<f4", offset=8).copy()
            if fh.read(1):
                raise ValueError(f"{path}: trailing bytes after {count} entries")
        config_hash = checkpoint_hash = None
        meta_file = sidecar_path(path)
        if meta_file.exists():
            meta = json.loads(meta_file.read_text())
            config_hash = meta.get("config_hash")
            checkpoint_hash = meta.get("checkpoint_hash")
        return cls(entries=entries, dim=dim, config_hash=config_hash,
                   checkpoint_hash=checkpoint_hash)


def is_embedding_file(path: str | Path) -> bool:
    """Sniff the magic bytes without reading the whole file."""
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == MAGIC
    except OSError:
        return False


def mean_by_cell(points: Iterable[tuple[float, float, np.ndarray]],
                 level: int) -> Mapping[int, np.ndarray]:
    """Average point vectors that fall into the same level-`level` cell."""
    from .s2geom import LatLng

    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for lat, lng, vec in points:
        raw = CellId.from_latlng(LatLng(lat, lng), level).raw
        if raw in sums:
            sums[raw] = sums[raw] + vec
            counts[raw] += 1
        else:
            sums[raw] = np.asarray(vec, dtype=np.float64).copy()
            counts[raw] = 1
    return {raw: (total / counts[raw]).astype(np.float32)
            for raw, total in sums.items()}
