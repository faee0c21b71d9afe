"""Synthetic data generator for desk-scale end-to-end runs.

Latent spatial fields are sums of low-frequency sinusoids over lat/lng.
Per-cell feature counts are softplus images of the latents through a
random mixing matrix, rounded to integers; regression targets are a
linear function of the latents plus Gaussian noise; external embeddings
are noisy linear images of the latents. Everything is determined by the
spec's seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .downstream import metric_r2
from .ingest import CellFeatures, write_features
from .s2geom import CellId, LatLng, cell_center, cell_from_latlng

COMPONENTS_PER_FIELD = 3
COUNT_SCALE = 4.0
TARGET_SCALE = 2.0


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic world."""

    seed: int = 0
    box: tuple[float, float, float, float] = (5.0, 10.0, 5.0, 10.0)
    latent_count: int = 4
    smoothness: float = 2.0
    feature_dim: int = 116
    noise: float = 0.1
    image_level: int = 8
    patch_level: int = 12
    external_dim: int = 8
    count_latents: tuple[int, ...] | None = None
    external_latents: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        lat_min, lat_max, lng_min, lng_max = self.box
        if not (lat_min < lat_max and lng_min < lng_max):
            raise ValueError("box must satisfy lat_min < lat_max and "
                             "lng_min < lng_max")
        if not (-85.0 <= lat_min and lat_max <= 85.0):
            raise ValueError("box latitudes must stay within [-85, 85]")
        if not (-180.0 <= lng_min and lng_max <= 180.0):
            raise ValueError("box longitudes must stay within [-180, 180]")
        if self.latent_count < 1:
            raise ValueError("latent_count must be >= 1")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be positive")
        if self.feature_dim < 1 or self.external_dim < 1:
            raise ValueError("feature_dim and external_dim must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 <= self.image_level < self.patch_level <= 30:
            raise ValueError("need 0 <= image_level < patch_level <= 30")
        for subset in (self.count_latents, self.external_latents):
            if subset is not None:
                if len(subset) == 0 or len(set(subset)) != len(subset):
                    raise ValueError("latent subsets must be nonempty and unique")
                if any(not 0 <= i < self.latent_count for i in subset):
                    raise ValueError("latent subset index out of range")


@dataclass(frozen=True)
class FieldParams:
    """Sampled sinusoid components of the K latent fields."""

    amplitude: np.ndarray  # [K, J]
    freq_lat: np.ndarray   # [K, J] cycles per degree
    freq_lng: np.ndarray   # [K, J]
    phase: np.ndarray      # [K, J]


@dataclass(frozen=True)
class SynthSummary:
    features_path: str
    labels_path: str
    external_path: str
    manifest_path: str
    cell_count: int
    image_count: int
    oracle_r2: float


def sample_fields(rng: np.random.Generator, latent_count: int,
                  smoothness: float) -> FieldParams:
    """Draw sinusoid parameters; wavelengths stay >= smoothness degrees."""
    shape = (latent_count, COMPONENTS_PER_FIELD)
    theta = rng.uniform(0.0, 2.0 * np.pi, shape)
    wavelength = rng.uniform(smoothness, 3.0 * smoothness, shape)
    phase = rng.uniform(0.0, 2.0 * np.pi, shape)
    amplitude = np.full(shape, 1.0 / math.sqrt(COMPONENTS_PER_FIELD))
    return FieldParams(amplitude=amplitude,
                       freq_lat=np.cos(theta) / wavelength,
                       freq_lng=np.sin(theta) / wavelength,
                       phase=phase)


def latent_values(fields: FieldParams, lats: np.ndarray,
                  lngs: np.ndarray) -> np.ndarray:
    """Evaluate the K fields at each point; returns [N, K]."""
    lats = np.asarray(lats, dtype=np.float64)[:, None, None]
    lngs = np.asarray(lngs, dtype=np.float64)[:, None, None]
    angle = 2.0 * np.pi * (lats * fields.freq_lat + lngs * fields.freq_lng) \
        + fields.phase
    return (fields.amplitude * np.sin(angle)).sum(axis=2)


def box_cells(box: tuple[float, float, float, float],
              level: int) -> list[CellId]:
    """All level-`level` cells whose center lies inside the box.

    Found by sampling the box densely enough (quarter of the worst-case
    cell extent in degrees) that no qualifying cell is missed.
    """
    lat_min, lat_max, lng_min, lng_max = box
    step = (45.0 / (1 << level)) / 4.0
    n_lat = max(2, int(math.ceil((lat_max - lat_min) / step)) + 1)
    n_lng = max(2, int(math.ceil((lng_max - lng_min) / step)) + 1)
    seen: dict[int, CellId] = {}
    for lat in np.linspace(lat_min, lat_max, n_lat):
        for lng in np.linspace(lng_min, lng_max, n_lng):
            cell = cell_from_latlng(LatLng(float(lat), float(lng)), level)
            if cell.raw in seen:
                continue
            center = cell_center(cell)
            if lat_min <= center.lat <= lat_max \
                    and lng_min <= center.lng <= lng_max:
                seen[cell.raw] = cell
    return [seen[raw] for raw in sorted(seen)]


def _patch_cells(spec: SynthSpec) -> tuple[list[CellId], list[CellId]]:
    """Image cells with centers in the box, plus all their patch children."""
    parents = box_cells(spec.box, spec.image_level)
    if not parents:
        raise ValueError("box contains no image cells; enlarge it")
    patches: list[CellId] = []
    for parent in parents:
        patches.extend(parent.descendants(spec.patch_level))
    patches.sort(key=lambda c: c.raw)
    return parents, patches


def _restricted(matrix: np.ndarray,
                subset: tuple[int, ...] | None) -> np.ndarray:
    if subset is None:
        return matrix
    keep = np.zeros(matrix.shape[1], dtype=bool)
    keep[list(subset)] = True
    return matrix * keep


def generate(spec: SynthSpec, out_dir: str | Path) -> SynthSummary:
    """Write feature, label, and external-embedding JSONL files plus a
    manifest; returns paths and the latent-oracle regression R^2.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    fields = sample_fields(rng, spec.latent_count, spec.smoothness)
    k = spec.latent_count
    mixing = _restricted(
        rng.normal(0.0, COUNT_SCALE / math.sqrt(k), (spec.feature_dim, k)),
        spec.count_latents)
    raw_w = rng.normal(size=k)
    target_w = TARGET_SCALE * raw_w / np.linalg.norm(raw_w)
    external_map = _restricted(rng.normal(size=(spec.external_dim, k)),
                               spec.external_latents)

    parents, patches = _patch_cells(spec)
    centers = [cell_center(c) for c in patches]
    lats = np.array([c.lat for c in centers])
    lngs = np.array([c.lng for c in centers])
    latents = latent_values(fields, lats, lngs)  # [N, K]

    counts = np.rint(np.logaddexp(0.0, latents @ mixing.T))
    signal = latents @ target_w
    spread = float(signal.std())
    if spread < 1e-9:
        raise ValueError("latent fields are constant over the box; "
                         "enlarge it or reduce smoothness")
    # standardize so the signal-to-noise ratio does not depend on the box
    signal = TARGET_SCALE * (signal - signal.mean()) / spread
    targets = signal + rng.normal(0.0, spec.noise, len(patches))
    external = latents @ external_map.T \
        + rng.normal(0.0, spec.noise, (len(patches), spec.external_dim))

    features_path = out / "features.jsonl"
    write_features(features_path,
                   (CellFeatures(token=c.token(), counts=row)
                    for c, row in zip(patches, counts)))
    labels_path = out / "labels.jsonl"
    with open(labels_path, "w", encoding="utf-8") as fh:
        for cell, target in zip(patches, targets):
            fh.write(json.dumps({"token": cell.token(),
                                 "target": float(target)}) + "\n")
    external_path = out / "external.jsonl"
    with open(external_path, "w", encoding="utf-8") as fh:
        for center, vector in zip(centers, external):
            fh.write(json.dumps({"lat": center.lat, "lng": center.lng,
                                 "vector": [float(v) for v in vector]})
                     + "\n")

    design = np.concatenate([latents, np.ones((len(patches), 1))], axis=1)
    beta, *_ = np.linalg.lstsq(design, targets, rcond=None)
    oracle_r2 = metric_r2(design @ beta, targets)

    manifest_path = out / "synth_manifest.json"
    manifest = {
        "seed": spec.seed, "box": list(spec.box),
        "latent_count": spec.latent_count, "smoothness": spec.smoothness,
        "feature_dim": spec.feature_dim, "noise": spec.noise,
        "image_level": spec.image_level, "patch_level": spec.patch_level,
        "external_dim": spec.external_dim,
        "cell_count": len(patches), "image_count": len(parents),
        "oracle_r2": oracle_r2,
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return SynthSummary(features_path=str(features_path),
                        labels_path=str(labels_path),
                        external_path=str(external_path),
                        manifest_path=str(manifest_path),
                        cell_count=len(patches), image_count=len(parents),
                        oracle_r2=oracle_r2)
