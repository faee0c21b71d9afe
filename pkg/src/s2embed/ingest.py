"""Per-cell feature ingestion and global normalization.

Feature files are UTF-8 JSONL, one record per cell:

    {"token": "89c25a31", "counts": [0, 3, 1, ...]}

Every record in a file must decode to a cell at the same level and carry
the same number of counts. Normalization statistics are column-wise
population mean and variance, accumulated with a numerically stable
streaming algorithm whose shards can be merged in any order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .s2geom import CellId

DEFAULT_FEATURE_DIM = 116
VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class CellFeatures:
    """Raw feature counts for one cell."""

    token: str
    counts: np.ndarray

    def cell(self) -> CellId:
        return CellId.from_token(self.token)


class _Moments:
    """Streaming mean/M2 accumulator with exact pairwise merge."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def merge(self, other: "_Moments") -> "_Moments":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count = other.count
            self.mean = other.mean.copy()
            self.m2 = other.m2.copy()
            return self
        total = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / total)
        self.m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / total)
        self.count = total
        return self


@dataclass(frozen=True)
class NormStats:
    """Column-wise population statistics of a feature dataset."""

    mean: np.ndarray
    variance: np.ndarray
    count: int

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("statistics need at least one record")
        if self.mean.shape != self.variance.shape or self.mean.ndim != 1:
            raise ValueError("mean and variance must be 1-D and equal length")
        if np.any(self.variance < 0):
            raise ValueError("variance must be non-negative")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def merge(self, other: "NormStats") -> "NormStats":
        """Statistics of the concatenation of both datasets."""
        if self.dim != other.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        a = _Moments(self.dim)
        a.count, a.mean, a.m2 = self.count, self.mean.copy(), self.variance * self.count
        b = _Moments(other.dim)
        b.count, b.mean, b.m2 = other.count, other.mean.copy(), other.variance * other.count
        a.merge(b)
        return NormStats(mean=a.mean, variance=a.m2 / a.count, count=a.count)

    def save(self, path: str | Path) -> None:
        payload = {"mean": self.mean.tolist(), "variance": self.variance.tolist(),
                   "count": self.count}
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        payload = json.loads(Path(path).read_text())
        return cls(mean=np.asarray(payload["mean"], dtype=np.float64),
                   variance=np.asarray(payload["variance"], dtype=np.float64),
                   count=int(payload["count"]))


def load_features(path: str | Path) -> list[CellFeatures]:
    """Load and validate a JSONL feature file.

    Raises ValueError naming the offending line for malformed JSON, bad
    tokens, ragged counts, duplicate tokens, or mixed cell levels.
    """
    records: list[CellFeatures] = []
    seen: set[str] = set()
    dim: int | None = None
    level: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc}") from None
            if not isinstance(obj, dict) or "token" not in obj or "counts" not in obj:
                raise ValueError(f"{path}:{lineno}: record needs 'token' and 'counts'")
            token = obj["token"]
            try:
                cell = CellId.from_token(token)
            except (ValueError, TypeError):
                raise ValueError(f"{path}:{lineno}: bad cell token {token!r}") from None
            if token in seen:
                raise ValueError(f"{path}:{lineno}: duplicate token {token!r}")
            counts = np.asarray(obj["counts"], dtype=np.float64)
            if counts.ndim != 1 or counts.size == 0:
                raise ValueError(f"{path}:{lineno}: counts must be a flat non-empty list")
            if dim is None:
                dim = counts.size
            elif counts.size != dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim} counts, got {counts.size}")
            if level is None:
                level = cell.level()
            elif cell.level() != level:
                raise ValueError(
                    f"{path}:{lineno}: cell level {cell.level()} differs from {level}")
            if not np.all(np.isfinite(counts)) or np.any(counts < 0):
                raise ValueError(f"{path}:{lineno}: counts must be finite and >= 0")
            seen.add(token)
            records.append(CellFeatures(token=token, counts=counts))
    return records


def fit_norm_stats(records: Iterable[CellFeatures]) -> NormStats:
    """Population mean/variance per feature over a nonempty record stream."""
    acc: _Moments | None = None
    for rec in records:
        if acc is None:
            acc = _Moments(rec.counts.size)
        acc.add(rec.counts)
    if acc is None or acc.count == 0:
        raise ValueError("cannot fit statistics on an empty dataset")
    return NormStats(mean=acc.mean, variance=acc.m2 / acc.count, count=acc.count)


def fit_norm_stats_sharded(shards: Sequence[Iterable[CellFeatures]]) -> NormStats:
    """Fit per shard and merge; equals the single-pass fit on the union."""
    fitted = [fit_norm_stats(shard) for shard in shards if shard]
    if not fitted:
        raise ValueError("cannot fit statistics on an empty dataset")
    out = fitted[0]
    for stats in fitted[1:]:
        out = out.merge(stats)
    return out


def apply_norm(counts: np.ndarray, stats: NormStats,
               eps: float = VARIANCE_FLOOR) -> np.ndarray:
    """Standardize a count vector (or matrix of rows) with a variance floor."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape[-1] != stats.dim:
        raise ValueError(f"expected {stats.dim} features, got {counts.shape[-1]}")
    return (counts - stats.mean) / np.sqrt(np.maximum(stats.variance, eps))


def unapply_norm(normalized: np.ndarray, stats: NormStats,
                 eps: float = VARIANCE_FLOOR) -> np.ndarray:
    """Inverse of apply_norm."""
    normalized = np.asarray(normalized, dtype=np.float64)
    if normalized.shape[-1] != stats.dim:
        raise ValueError(f"expected {stats.dim} features, got {normalized.shape[-1]}")
    return normalized * np.sqrt(np.maximum(stats.variance, eps)) + stats.mean


def write_features(path: str | Path, records: Iterable[CellFeatures]) -> None:
    """Write records as JSONL in the ingestion format."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            counts = [int(c) if float(c).is_integer() else float(c)
                      for c in rec.counts.tolist()]
            fh.write(json.dumps({"token": rec.token, "counts": counts}) + "\n")
