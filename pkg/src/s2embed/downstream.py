"""Downstream evaluation harness.

Point labels are aggregated to cells by median, targets min-max scaled
with statistics fitted on the training split only, and a two-layer MLP
probe (GELU hidden layer, dropout, AdamW, early stopping on validation
loss) regresses scaled targets from cell embeddings. Supports random
60/20/20 and geographic-holdout splits, three ways of fusing multiple
embedding sources, and an optional multi-scale location encoding.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import nn
from .embeddings import EmbeddingTable, is_embedding_file, mean_by_cell
from .nn import Tensor
from .s2geom import CellId, LatLng, cell_center, cell_from_latlng, parent_at


# -- labels ----------------------------------------------------------------


@dataclass(frozen=True)
class LabeledCell:
    """One cell with its aggregated regression target (raw units)."""

    token: str
    target: float

    def __post_init__(self) -> None:
        CellId.from_token(self.token)
        if not math.isfinite(self.target):
            raise ValueError(f"target for {self.token} is not finite")

    def cell(self) -> CellId:
        return CellId.from_token(self.token)


def aggregate_labels(points: Iterable[tuple[LatLng, float]],
                     level: int) -> list[LabeledCell]:
    """Group point targets by containing cell; per-cell label = median.

    An even count takes the mean of the two middle values.
    """
    groups: dict[str, list[float]] = {}
    for point, target in points:
        if not math.isfinite(target):
            raise ValueError(f"non-finite target at {point}")
        token = cell_from_latlng(point, level).token()
        groups.setdefault(token, []).append(target)
    if not groups:
        raise ValueError("no labeled points")
    return [LabeledCell(token=token, target=float(np.median(values)))
            for token, values in sorted(groups.items())]


def load_labels(path: str | Path, level: int) -> list[LabeledCell]:
    """Read JSONL labels: {"lat","lng","target"} or {"token","target"}."""
    groups: dict[str, list[float]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad JSON: {exc}") from None
            try:
                target = float(obj["target"])
            except (KeyError, TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: missing or bad target") from None
            if not math.isfinite(target):
                raise ValueError(f"{path}:{lineno}: non-finite target")
            try:
                if "token" in obj:
                    cell = CellId.from_token(obj["token"])
                    if cell.level() < level:
                        raise ValueError(
                            f"cell {obj['token']} is coarser than "
                            f"aggregation level {level}")
                    token = parent_at(cell, level).token()
                else:
                    point = LatLng(float(obj["lat"]), float(obj["lng"]))
                    token = cell_from_latlng(point, level).token()
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            groups.setdefault(token, []).append(target)
    if not groups:
        raise ValueError(f"{path}: no labeled points")
    return [LabeledCell(token=token, target=float(np.median(values)))
            for token, values in sorted(groups.items())]


# -- target scaling --------------------------------------------------------


@dataclass(frozen=True)
class TargetScaler:
    """Min-max map fitted on training targets; held-out values may land
    outside [0, 1]."""

    minimum: float
    maximum: float

    def __post_init__(self) -> None:
        if not self.maximum > self.minimum:
            raise ValueError("scaler needs max > min (nonconstant targets)")

    def transform(self, targets) -> np.ndarray:
        return (np.asarray(targets, dtype=np.float64) - self.minimum) \
            / (self.maximum - self.minimum)

    def inverse(self, scaled) -> np.ndarray:
        return np.asarray(scaled, dtype=np.float64) \
            * (self.maximum - self.minimum) + self.minimum

    def fingerprint(self) -> str:
        blob = struct.pack("<dd", self.minimum, self.maximum)
        return hashlib.sha256(blob).hexdigest()[:16]


def scale_targets(cells: Sequence[LabeledCell],
                  fit_on: Sequence[LabeledCell],
                  ) -> tuple[list[LabeledCell], TargetScaler]:
    """Min-max scale every cell's target using statistics from fit_on only."""
    if not fit_on:
        raise ValueError("cannot fit a scaler on an empty training set")
    targets = [c.target for c in fit_on]
    scaler = TargetScaler(minimum=min(targets), maximum=max(targets))
    scaled = [replace(c, target=float(scaler.transform(c.target)))
              for c in cells]
    return scaled, scaler


# -- splits ----------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """How to partition labeled cells for one evaluation."""

    kind: str = "random"  # "random" | "geographic"
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    region: tuple[tuple[float, float], ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("random", "geographic"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) <= 0:
            raise ValueError("fractions must be positive and sum to 1")
        if self.kind == "geographic" and not self.region:
            raise ValueError("geographic split needs a holdout region")


def load_region(path: str | Path) -> tuple[tuple[float, float], ...]:
    """Read a holdout polygon: JSON {"ring": [[lat, lng], ...]}."""
    obj = json.loads(Path(path).read_text())
    ring = obj.get("ring")
    if not isinstance(ring, list) or len(ring) < 3:
        raise ValueError(f"{path}: region needs a ring of >= 3 vertices")
    out = []
    for vertex in ring:
        lat, lng = float(vertex[0]), float(vertex[1])
        out.append((lat, lng))
    return tuple(out)


def box_region(lat_min: float, lat_max: float, lng_min: float,
               lng_max: float) -> tuple[tuple[float, float], ...]:
    if not (lat_min < lat_max and lng_min < lng_max):
        raise ValueError("box needs lat_min < lat_max and lng_min < lng_max")
    return ((lat_min, lng_min), (lat_min, lng_max),
            (lat_max, lng_max), (lat_max, lng_min))


def point_in_region(lat: float, lng: float,
                    ring: Sequence[tuple[float, float]]) -> bool:
    """Even-odd ray casting in the equirectangular (lng, lat) plane."""
    inside = False
    n = len(ring)
    for k in range(n):
        lat1, lng1 = ring[k]
        lat2, lng2 = ring[(k + 1) % n]
        if (lat1 > lat) != (lat2 > lat):
            crossing = lng1 + (lat - lat1) / (lat2 - lat1) * (lng2 - lng1)
            if crossing > lng:
                inside = not inside
    return inside


def _partition_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    # largest-remainder rounding; every part stays nonempty
    floors = [int(n * f) for f in fractions]
    remainders = [n * f - fl for f, fl in zip(fractions, floors)]
    for _ in range(n - sum(floors)):
        k = max(range(len(fractions)), key=lambda i: remainders[i])
        floors[k] += 1
        remainders[k] = -1.0
    while min(floors) == 0:
        floors[floors.index(max(floors))] -= 1
        floors[floors.index(min(floors))] += 1
    return floors


def split_random(cells: Sequence, fractions: Sequence[float],
                 seed: int) -> tuple[list, list, list]:
    """Shuffled partition into train/val/test by the given fractions."""
    n = len(cells)
    if n < 3:
        raise ValueError(f"need at least 3 cells to split, got {n}")
    sizes = _partition_sizes(n, fractions)
    order = np.random.default_rng(seed).permutation(n)
    train = [cells[i] for i in order[:sizes[0]]]
    val = [cells[i] for i in order[sizes[0]:sizes[0] + sizes[1]]]
    test = [cells[i] for i in order[sizes[0] + sizes[1]:]]
    return train, val, test


def split_geographic(cells: Sequence[LabeledCell],
                     region: Sequence[tuple[float, float]],
                     seed: int) -> tuple[list[LabeledCell],
                                         list[LabeledCell],
                                         list[LabeledCell]]:
    """Hold out every cell whose center lies in the region as test; split
    the remainder 75/25 into train/val (mirrors the 60/20 random ratio).
    """
    if not region or len(region) < 3:
        raise ValueError("holdout region needs at least 3 vertices")
    test, remainder = [], []
    for cell in cells:
        center = cell_center(cell.cell())
        if point_in_region(center.lat, center.lng, region):
            test.append(cell)
        else:
            remainder.append(cell)
    if not test:
        raise ValueError("no cells fall inside the holdout region")
    if len(remainder) < 2:
        raise ValueError("too few cells outside the holdout region")
    n_train = max(1, min(len(remainder) - 1,
                         int(round(0.75 * len(remainder)))))
    order = np.random.default_rng(seed).permutation(len(remainder))
    train = [remainder[i] for i in order[:n_train]]
    val = [remainder[i] for i in order[n_train:]]
    return train, val, test


# -- location encoding -----------------------------------------------------


def default_scales(count: int = 16, lam_min: float = 0.01,
                   lam_max: float = 360.0) -> np.ndarray:
    """Geometric progression of wavelengths, in degrees."""
    if count < 1 or lam_min <= 0 or lam_max <= lam_min:
        raise ValueError("need count >= 1 and 0 < lam_min < lam_max")
    if count == 1:
        return np.array([lam_min])
    ratio = (lam_max / lam_min) ** (1.0 / (count - 1))
    return lam_min * ratio ** np.arange(count)


def location_encode(point: LatLng,
                    scales: np.ndarray | None = None) -> np.ndarray:
    """Multi-scale sinusoidal features of the equirectangular coordinates.

    Per wavelength s: [sin(x/s), cos(x/s), sin(y/s), cos(y/s)] with
    x = longitude and y = latitude in degrees; output length 4 * len(scales).
    """
    if scales is None:
        scales = default_scales()
    scales = np.asarray(scales, dtype=np.float64)
    if scales.ndim != 1 or scales.size < 1 or np.any(scales <= 0):
        raise ValueError("scales must be a 1-d array of positive wavelengths")
    x = point.lng / scales
    y = point.lat / scales
    return np.stack([np.sin(x), np.cos(x), np.sin(y), np.cos(y)],
                    axis=1).reshape(-1)


def location_matrix(cells: Sequence[LabeledCell],
                    scales: np.ndarray | None = None) -> np.ndarray:
    return np.stack([location_encode(cell_center(c.cell()), scales)
                     for c in cells])


# -- fusion ----------------------------------------------------------------


@dataclass(frozen=True)
class FusionSpec:
    """How multiple embedding sources combine into one probe input."""

    mode: str = "concat"  # "concat" | "weighted-add" | "project-add"
    projection_dim: int = 256

    def __post_init__(self) -> None:
        if self.mode not in ("concat", "weighted-add", "project-add"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.projection_dim < 1:
            raise ValueError("projection_dim must be positive")


def fused_dim(spec: FusionSpec, dims: Sequence[int]) -> int:
    if spec.mode == "concat":
        return int(sum(dims))
    if spec.mode == "weighted-add":
        if len(set(dims)) != 1:
            raise ValueError(
                f"weighted-add needs equal source dims, got {list(dims)}")
        return int(dims[0])
    return spec.projection_dim


def init_fusion_params(spec: FusionSpec, dims: Sequence[int],
                       rng: np.random.Generator) -> dict[str, Tensor]:
    fused_dim(spec, dims)  # validates mode constraints
    params: dict[str, Tensor] = {}
    if spec.mode == "weighted-add":
        for i in range(len(dims)):
            params[f"fuse.{i}.w"] = Tensor(np.ones(1), requires_grad=True)
    elif spec.mode == "project-add":
        for i, dim in enumerate(dims):
            scale = 1.0 / math.sqrt(dim)
            params[f"fuse.{i}.w"] = Tensor(
                rng.normal(0.0, scale, (dim, spec.projection_dim)),
                requires_grad=True)
            params[f"fuse.{i}.b"] = Tensor(np.zeros(spec.projection_dim),
                                           requires_grad=True)
    return params


def apply_fusion(spec: FusionSpec, params: Mapping[str, Tensor],
                 sources: Sequence[np.ndarray]) -> Tensor:
    """Combine per-source matrices [N, d_i] into the fused input Tensor."""
    if not sources:
        raise ValueError("fusion needs at least one source")
    if spec.mode == "concat":
        return nn.concat_cols([Tensor.ensure(x) for x in sources])
    if spec.mode == "weighted-add":
        total = params["fuse.0.w"] * Tensor.ensure(sources[0])
        for i in range(1, len(sources)):
            total = total + params[f"fuse.{i}.w"] * Tensor.ensure(sources[i])
        return total
    total = None
    for i, x in enumerate(sources):
        piece = nn.gelu(nn.linear(Tensor.ensure(x), params[f"fuse.{i}.w"],
                                  params[f"fuse.{i}.b"]))
        total = piece if total is None else total + piece
    return total


def source_matrix(table: EmbeddingTable,
                  cells: Sequence[LabeledCell]) -> np.ndarray:
    """Stack one table's vectors for the cells; error if any is missing."""
    rows = []
    for cell in cells:
        raw = cell.cell().raw
        if raw not in table:
            raise ValueError(f"cell {cell.token} missing from a source")
        rows.append(table.get(raw))
    return np.stack(rows).astype(np.float64)


def covered_cells(cells: Sequence[LabeledCell],
                  tables: Sequence[EmbeddingTable]) -> list[LabeledCell]:
    """Cells present in every source table."""
    return [c for c in cells
            if all(c.cell().raw in t for t in tables)]


def load_external_embeddings(path: str | Path, level: int) -> EmbeddingTable:
    """Load a source table: native embedding file, or JSONL points
    {"lat","lng","vector"} averaged per level-`level` cell.
    """
    if is_embedding_file(path):
        return EmbeddingTable.load(path)
    points: list[tuple[float, float, np.ndarray]] = []
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                vector = np.asarray(obj["vector"], dtype=np.float64)
                lat, lng = float(obj["lat"]), float(obj["lng"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: bad embedding record") from None
            if vector.ndim != 1 or vector.size == 0:
                raise ValueError(f"{path}:{lineno}: vector must be 1-d")
            if dim is None:
                dim = vector.size
            elif vector.size != dim:
                raise ValueError(f"{path}:{lineno}: vector length "
                                 f"{vector.size} != {dim}")
            points.append((lat, lng, vector))
    if not points:
        raise ValueError(f"{path}: no embedding records")
    means = mean_by_cell(points, level)
    ids = sorted(means)
    return EmbeddingTable.from_vectors(ids, np.stack([means[i] for i in ids]))


# -- probe -----------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    """Two-layer MLP probe hyperparameters."""

    hidden_units: int = 256
    dropout: float = 0.0
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 20
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


DEFAULT_GRID_HIDDEN = (64, 256, 1024)
DEFAULT_GRID_LR = (1e-4, 5e-4, 1e-3)
DEFAULT_GRID_DROPOUT = (0.0, 0.2, 0.5)


def probe_grid(hidden: Sequence[int] = DEFAULT_GRID_HIDDEN,
               learning_rates: Sequence[float] = DEFAULT_GRID_LR,
               dropouts: Sequence[float] = DEFAULT_GRID_DROPOUT,
               base: ProbeConfig = ProbeConfig()) -> list[ProbeConfig]:
    """Cartesian sweep grid over the three searched hyperparameters."""
    return [replace(base, hidden_units=h, learning_rate=lr, dropout=d)
            for h in hidden for lr in learning_rates for d in dropouts]


class EarlyStopper:
    """Stop when validation loss has not improved for `patience` checks."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_index = -1
        self.checks = 0
        self.since_best = 0

    def update(self, loss: float) -> bool:
        """Record one validation loss; returns True when training should stop."""
        index = self.checks
        self.checks += 1
        if loss < self.best:
            self.best = loss
            self.best_index = index
            self.since_best = 0
            return False
        self.since_best += 1
        return self.since_best >= self.patience


@dataclass
class TrainedProbe:
    params: dict[str, Tensor]
    fusion: FusionSpec
    config: ProbeConfig
    best_val_loss: float
    train_history: list[float]
    val_history: list[float]
    location_dim: int = 0


def _init_probe_params(in_dim: int, hidden: int,
                       rng: np.random.Generator) -> dict[str, Tensor]:
    return {
        "probe.w1": Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim),
                                      (in_dim, hidden)), requires_grad=True),
        "probe.b1": Tensor(np.zeros(hidden), requires_grad=True),
        "probe.w2": Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden),
                                      (hidden, 1)), requires_grad=True),
        "probe.b2": Tensor(np.zeros(1), requires_grad=True),
    }


def _probe_forward(params: Mapping[str, Tensor], fusion: FusionSpec,
                   sources: Sequence[np.ndarray],
                   location: np.ndarray | None, dropout_rate: float,
                   rng, train: bool) -> Tensor:
    fused = apply_fusion(fusion, params, sources)
    if location is not None:
        fused = nn.concat_cols([fused, Tensor.ensure(location)])
    hidden = nn.gelu(nn.linear(fused, params["probe.w1"], params["probe.b1"]))
    hidden = nn.dropout(hidden, dropout_rate, rng, train)
    out = nn.linear(hidden, params["probe.w2"], params["probe.b2"])
    return out.reshape(out.shape[0])


def train_probe(sources_train: Sequence[np.ndarray], y_train: np.ndarray,
                sources_val: Sequence[np.ndarray], y_val: np.ndarray,
                cfg: ProbeConfig,
                fusion: FusionSpec = FusionSpec(),
                location_train: np.ndarray | None = None,
                location_val: np.ndarray | None = None) -> TrainedProbe:
    """Fit the probe (and any fusion parameters) by full-batch AdamW with
    early stopping; the returned parameters achieve the best val loss.
    """
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if y_train.size == 0 or y_val.size == 0:
        raise ValueError("train and val sets must be nonempty")
    if not sources_train or len(sources_train) != len(sources_val):
        raise ValueError("train and val need the same nonempty source list")
    dims = [x.shape[1] for x in sources_train]
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng, dropout_rng = map(np.random.default_rng, seeds)
    params = init_fusion_params(fusion, dims, init_rng)
    in_dim = fused_dim(fusion, dims)
    if location_train is not None:
        in_dim += location_train.shape[1]
    params.update(_init_probe_params(in_dim, cfg.hidden_units, init_rng))
    optimizer = nn.AdamW(params, weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.patience)
    best_params = {k: p.data.copy() for k, p in params.items()}
    train_history: list[float] = []
    val_history: list[float] = []
    for _ in range(cfg.max_epochs):
        pred = _probe_forward(params, fusion, sources_train, location_train,
                              cfg.dropout, dropout_rng, train=True)
        diff = pred - Tensor(y_train)
        loss = (diff * diff).mean()
        value = loss.item()
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite training loss {value}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step(cfg.learning_rate)
        train_history.append(value)

        val_pred = _probe_forward(params, fusion, sources_val, location_val,
                                  cfg.dropout, dropout_rng, train=False).data
        val_loss = float(np.mean((val_pred - y_val) ** 2))
        if not math.isfinite(val_loss):
            raise RuntimeError(f"non-finite validation loss {val_loss}")
        improved = val_loss < stopper.best
        stop = stopper.update(val_loss)
        val_history.append(val_loss)
        if improved:
            best_params = {k: p.data.copy() for k, p in params.items()}
        if stop:
            break
    for name, param in params.items():
        param.data = best_params[name]
    loc_dim = 0 if location_train is None else location_train.shape[1]
    return TrainedProbe(params=params, fusion=fusion, config=cfg,
                        best_val_loss=stopper.best,
                        train_history=train_history,
                        val_history=val_history, location_dim=loc_dim)


def predict(probe: TrainedProbe, sources: Sequence[np.ndarray],
            location: np.ndarray | None = None) -> np.ndarray:
    if (location is None) != (probe.location_dim == 0):
        raise ValueError("probe was trained with a different location setting")
    out = _probe_forward(probe.params, probe.fusion, sources, location,
                         0.0, None, train=False)
    return out.data.copy()


# -- metrics ---------------------------------------------------------------


def metric_r2(pred, truth) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size < 2:
        raise ValueError("metric_r2 needs matching arrays of length >= 2")
    ss_tot = float(((truth - truth.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for constant truth")
    ss_res = float(((truth - pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def metric_mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size < 1:
        raise ValueError("metric_mae needs matching nonempty arrays")
    return float(np.abs(pred - truth).mean())


# -- evaluation driver -----------------------------------------------------


@dataclass
class EvalReport:
    """Per-seed and aggregate probe metrics for one (split, fusion) setup."""

    split_kind: str
    fusion_mode: str
    seeds: list[int]
    r2: list[float]
    mae: list[float]
    scaler_ranges: list[tuple[float, float]]
    chosen_config: dict
    include_location: bool = False
    config_hash: str | None = None

    @property
    def r2_mean(self) -> float:
        return float(np.mean(self.r2))

    @property
    def r2_std(self) -> float:
        return float(np.std(self.r2))

    @property
    def mae_mean(self) -> float:
        return float(np.mean(self.mae))

    @property
    def mae_std(self) -> float:
        return float(np.std(self.mae))

    def to_dict(self) -> dict:
        return {
            "split_kind": self.split_kind,
            "fusion_mode": self.fusion_mode,
            "include_location": self.include_location,
            "config_hash": self.config_hash,
            "seeds": list(self.seeds),
            "r2": list(self.r2),
            "mae": list(self.mae),
            "scaler_ranges": [list(r) for r in self.scaler_ranges],
            "chosen_config": dict(self.chosen_config),
            "aggregates": {
                "seed_count": len(self.seeds),
                "r2_mean": self.r2_mean, "r2_std": self.r2_std,
                "mae_mean": self.mae_mean, "mae_std": self.mae_std,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_tsv(self) -> str:
        lines = ["seed\tr2\tmae"]
        for seed, r2, mae in zip(self.seeds, self.r2, self.mae):
            lines.append(f"{seed}\t{r2:.6f}\t{mae:.6f}")
        lines.append(f"mean\t{self.r2_mean:.6f}\t{self.mae_mean:.6f}")
        lines.append(f"std\t{self.r2_std:.6f}\t{self.mae_std:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        return cls(split_kind=obj["split_kind"],
                   fusion_mode=obj["fusion_mode"],
                   seeds=list(obj["seeds"]), r2=list(obj["r2"]),
                   mae=list(obj["mae"]),
                   scaler_ranges=[tuple(r) for r in obj["scaler_ranges"]],
                   chosen_config=obj["chosen_config"],
                   include_location=obj.get("include_location", False),
                   config_hash=obj.get("config_hash"))


def _split_for(cells: Sequence[LabeledCell], split: SplitSpec, seed: int):
    if split.kind == "random":
        return split_random(cells, split.fractions, seed)
    # geographic holdout is fixed; only probe seeds vary run to run
    return split_geographic(cells, split.region, split.seed)


def _matrices(tables: Sequence[EmbeddingTable],
              cells: Sequence[LabeledCell]) -> list[np.ndarray]:
    return [source_matrix(t, cells) for t in tables]


def sweep_and_evaluate(cells: Sequence[LabeledCell],
                       tables: Sequence[EmbeddingTable],
                       split: SplitSpec,
                       seeds: Sequence[int],
                       grid: Sequence[ProbeConfig] | None = None,
                       fusion: FusionSpec = FusionSpec(),
                       include_location: bool = False,
                       loc_per_source: bool = False,
                       location_scales: np.ndarray | None = None,
                       config_hash: str | None = None) -> EvalReport:
    """Pick probe hyperparameters by validation loss on the first seed's
    split, retrain the winner per seed, and aggregate test metrics.
    """
    if not seeds:
        raise ValueError("need at least one evaluation seed")
    if not tables:
        raise ValueError("need at least one embedding source")
    if grid is None:
        grid = [ProbeConfig()]

    def prepared(subset: Sequence[LabeledCell]):
        sources = _matrices(tables, subset)
        location = None
        if include_location or loc_per_source:
            location = location_matrix(subset, location_scales)
        if loc_per_source and location is not None:
            sources = [np.concatenate([x, location], axis=1)
                       for x in sources]
            location = None
        return sources, location

    def run(cfg: ProbeConfig, seed: int):
        train, val, test = _split_for(cells, split, seed)
        scaled_train, scaler = scale_targets(train, train)
        scaled_val, _ = scale_targets(val, train)
        scaled_test, _ = scale_targets(test, train)
        x_train, loc_train = prepared(train)
        x_val, loc_val = prepared(val)
        x_test, loc_test = prepared(test)
        probe = train_probe(
            x_train, [c.target for c in scaled_train],
            x_val, [c.target for c in scaled_val],
            replace(cfg, seed=seed), fusion=fusion,
            location_train=loc_train, location_val=loc_val)
        pred = predict(probe, x_test, location=loc_test)
        truth = np.array([c.target for c in scaled_test])
        return probe, pred, truth, scaler

    if len(grid) > 1:
        best_cfg, best_val = None, math.inf
        for cfg in grid:
            probe, _, _, _ = run(cfg, seeds[0])
            if probe.best_val_loss < best_val:
                best_cfg, best_val = cfg, probe.best_val_loss
    else:
        best_cfg = grid[0]

    r2s, maes, ranges = [], [], []
    for seed in seeds:
        _, pred, truth, scaler = run(best_cfg, seed)
        r2s.append(metric_r2(pred, truth))
        maes.append(metric_mae(pred, truth))
        ranges.append((scaler.minimum, scaler.maximum))
    chosen = {"hidden_units": best_cfg.hidden_units,
              "learning_rate": best_cfg.learning_rate,
              "dropout": best_cfg.dropout,
              "max_epochs": best_cfg.max_epochs,
              "patience": best_cfg.patience,
              "weight_decay": best_cfg.weight_decay}
    return EvalReport(split_kind=split.kind, fusion_mode=fusion.mode,
                      seeds=list(seeds), r2=r2s, mae=maes,
                      scaler_ranges=ranges, chosen_config=chosen,
                      include_location=include_location or loc_per_source,
                      config_hash=config_hash)
