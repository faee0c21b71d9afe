"""Rasterize patch-level cells into feature-image grids.

Each level-l' parent cell becomes one G x G x F image (G = 2**(l - l')),
with every present child's normalized feature vector at its grid
position and absent slots filled with the normalized zero-count vector.
A presence bitmap records which slots held real input cells.

Binary dataset format (little-endian):

    magic "S2VR", u16 version=1, u8 image_level, u8 patch_level,
    u16 feature_dim, u32 image_count;
    per image: u64 parent raw id,
               G*G*F float32 in row-major (row, col, feature) order,
               ceil(G*G/8) presence bytes (row-major, LSB-first).
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import CellFeatures, NormStats, apply_norm, load_features
from .s2geom import CellId, grid_position

MAGIC = b"S2VR"
VERSION = 1


@dataclass
class RasterImage:
    """One parent cell's grid of normalized child features."""

    parent_token: str
    grid: np.ndarray      # (G, G, F) float32
    presence: np.ndarray  # (G, G) bool

    @property
    def size(self) -> int:
        return self.grid.shape[0]


@dataclass
class RasterDataset:
    images: list[RasterImage]
    image_level: int
    patch_level: int
    feature_dim: int
    stats_fingerprint: str | None = field(default=None)

    @property
    def grid_size(self) -> int:
        return 1 << (self.patch_level - self.image_level)


def stats_fingerprint(stats: NormStats) -> str:
    """Content hash binding a dataset to the statistics that normalized it."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(stats.mean).tobytes())
    h.update(np.ascontiguousarray(stats.variance).tobytes())
    h.update(str(stats.count).encode())
    return h.hexdigest()[:16]


def group_by_parent(records: Sequence[CellFeatures],
                    image_level: int) -> dict[str, list[CellFeatures]]:
    """Assign each record to its ancestor at image_level.

    All records must sit at one common level strictly below image_level's
    children, i.e. patch level > image level.
    """
    groups: dict[str, list[CellFeatures]] = {}
    patch_level: int | None = None
    for rec in records:
        cell = rec.cell()
        if patch_level is None:
            patch_level = cell.level()
            if image_level >= patch_level:
                raise ValueError(
                    f"image level {image_level} must be below patch level {patch_level}")
        elif cell.level() != patch_level:
            raise ValueError(
                f"cell {rec.token} at level {cell.level()}, expected {patch_level}")
        parent_token = cell.parent(image_level).token()
        groups.setdefault(parent_token, []).append(rec)
    return groups


def rasterize_image(parent_token: str, children: Sequence[CellFeatures],
                    stats: NormStats, patch_level: int) -> RasterImage:
    """Place each child's normalized features at its grid position."""
    parent = CellId.from_token(parent_token)
    grid_size = 1 << (patch_level - parent.level())
    fill = apply_norm(np.zeros(stats.dim), stats).astype(np.float32)
    grid = np.broadcast_to(fill, (grid_size, grid_size, stats.dim)).copy()
    presence = np.zeros((grid_size, grid_size), dtype=bool)
    for rec in children:
        pos = grid_position(rec.cell(), parent)
        if presence[pos.row, pos.col]:
            raise ValueError(
                f"slot ({pos.row}, {pos.col}) of {parent_token} filled twice")
        grid[pos.row, pos.col] = apply_norm(rec.counts, stats).astype(np.float32)
        presence[pos.row, pos.col] = True
    return RasterImage(parent_token=parent_token, grid=grid, presence=presence)


def build_dataset(records: Sequence[CellFeatures], stats: NormStats,
                  image_level: int, patch_level: int,
                  min_present: float = 0.0) -> RasterDataset:
    """Rasterize all records, ordered by parent token.

    Parents with fewer than min_present * G*G present children are dropped.
    """
    if not 0.0 <= min_present <= 1.0:
        raise ValueError(f"min_present must lie in [0, 1], got {min_present}")
    groups = group_by_parent(records, image_level)
    total_slots = (1 << (patch_level - image_level)) ** 2
    images = []
    for parent_token in sorted(groups):
        children = groups[parent_token]
        if len(children) < min_present * total_slots:
            continue
        images.append(rasterize_image(parent_token, children, stats, patch_level))
    return RasterDataset(images=images, image_level=image_level,
                         patch_level=patch_level, feature_dim=stats.dim,
                         stats_fingerprint=stats_fingerprint(stats))


def build_dataset_from_file(feature_path: str | Path, stats: NormStats,
                            image_level: int, patch_level: int,
                            min_present: float = 0.0) -> RasterDataset:
    return build_dataset(load_features(feature_path), stats, image_level,
                         patch_level, min_present)


def save_dataset(path: str | Path, dataset: RasterDataset) -> None:
    grid_size = dataset.grid_size
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HBBHI", VERSION, dataset.image_level,
                             dataset.patch_level, dataset.feature_dim,
                             len(dataset.images)))
        for image in dataset.images:
            if image.grid.shape != (grid_size, grid_size, dataset.feature_dim):
                raise ValueError(f"image {image.parent_token} has shape "
                                 f"{image.grid.shape}")
            fh.write(struct.pack("<Q", CellId.from_token(image.parent_token).raw))
            fh.write(np.ascontiguousarray(image.grid, dtype="<f4").tobytes())
            bits = np.packbits(image.presence.reshape(-1), bitorder="little")
            fh.write(bits.tobytes())


def load_dataset(path: str | Path) -> RasterDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, image_level, patch_level, feature_dim, count = struct.unpack(
            "<HBBHI", fh.read(10))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        grid_size = 1 << (patch_level - image_level)
        slots = grid_size * grid_size
        presence_bytes = (slots + 7) // 8
        images = []
        for _ in range(count):
            (parent_raw,) = struct.unpack("<Q", fh.read(8))
            grid = np.frombuffer(fh.read(slots * feature_dim * 4), dtype="<f4")
            grid = grid.reshape(grid_size, grid_size, feature_dim).copy()
            bits = np.frombuffer(fh.read(presence_bytes), dtype=np.uint8)
            presence = np.unpackbits(bits, bitorder="little")[:slots]
            images.append(RasterImage(parent_token=CellId(parent_raw).token(),
                                      grid=grid,
                                      presence=presence.reshape(grid_size,
                                                                grid_size).astype(bool)))
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after {count} images")
    return RasterDataset(images=images, image_level=image_level,
                         patch_level=patch_level, feature_dim=feature_dim)
