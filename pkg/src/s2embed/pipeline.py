"""Staged pipeline orchestration with content-addressed provenance.

The pipeline runs ingest, stats, rasterize, pretrain, embed, and
(optionally) eval in order. Every stage reads only serialized artifacts
of earlier stages, so deleting one output and rerunning regenerates it
without repeating the rest. A hash of the configuration binds artifacts
to the settings that produced them; a mismatch marks them stale.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .downstream import (
    EvalReport,
    FusionSpec,
    ProbeConfig,
    SplitSpec,
    covered_cells,
    load_external_embeddings,
    load_labels,
    load_region,
    probe_grid,
    sweep_and_evaluate,
)
from .embeddings import EmbeddingTable
from .ingest import NormStats, fit_norm_stats, load_features, write_features
from .mae import (
    MaeConfig,
    extract_embeddings,
    extract_embeddings_contextual,
    extract_image_embeddings,
    load_params,
    pretrain,
    save_params,
)
from .raster import build_dataset, load_dataset, save_dataset

STAGE_ORDER = ("ingest", "stats", "rasterize", "pretrain", "embed", "eval")

ARTIFACTS: dict[str, tuple[str, ...]] = {
    "ingest": ("features.jsonl",),
    "stats": ("norm_stats.json",),
    "rasterize": ("dataset.bin",),
    "pretrain": ("model.ckpt", "model.ckpt.config.json", "history.json"),
    "embed": ("embeddings.bin", "embeddings.bin.meta.json"),
    "eval": ("eval_report.json", "eval_report.tsv"),
}

EMBED_MODES = ("patch", "contextual", "image")

Logger = Callable[[str], None]


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def is_validation(self) -> bool:
        return isinstance(self.cause, (ValueError, FileNotFoundError))


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one end-to-end run depends on."""

    features: str | None = None
    labels: str | None = None
    externals: tuple[str, ...] = ()
    region: str | None = None
    image_level: int = 8
    patch_level: int = 12
    feature_dim: int = 116
    min_present: float = 0.0
    embed_mode: str = "patch"
    mae: MaeConfig | None = None
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    split_kind: str = "random"
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0
    eval_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    include_location: bool = False
    loc_per_source: bool = False
    sweep: bool = False
    out_dir: str = "artifacts"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.image_level < self.patch_level <= 30:
            raise ValueError("need 0 <= image_level < patch_level <= 30")
        if self.embed_mode not in EMBED_MODES:
            raise ValueError(f"embed_mode must be one of {EMBED_MODES}")
        if self.split_kind not in ("random", "geographic"):
            raise ValueError(f"unknown split kind {self.split_kind!r}")
        if not self.eval_seeds:
            raise ValueError("eval_seeds must be nonempty")
        if not 0.0 <= self.min_present <= 1.0:
            raise ValueError("min_present must lie in [0, 1]")
        if self.mae is None:
            object.__setattr__(self, "mae", MaeConfig(
                feature_dim=self.feature_dim, grid=self.grid))
        if self.mae.grid != self.grid:
            raise ValueError(f"mae grid {self.mae.grid} does not match "
                             f"2^(patch_level - image_level) = {self.grid}")
        if self.mae.feature_dim != self.feature_dim:
            raise ValueError(f"mae feature_dim {self.mae.feature_dim} does "
                             f"not match feature_dim {self.feature_dim}")

    @property
    def grid(self) -> int:
        return 1 << (self.patch_level - self.image_level)

    def to_dict(self) -> dict:
        return {
            "features": self.features, "labels": self.labels,
            "externals": list(self.externals), "region": self.region,
            "image_level": self.image_level,
            "patch_level": self.patch_level,
            "feature_dim": self.feature_dim,
            "min_present": self.min_present,
            "embed_mode": self.embed_mode,
            "mae": asdict(self.mae),
            "probe": asdict(self.probe),
            "fusion": asdict(self.fusion),
            "split_kind": self.split_kind,
            "split_fractions": list(self.split_fractions),
            "split_seed": self.split_seed,
            "eval_seeds": list(self.eval_seeds),
            "include_location": self.include_location,
            "loc_per_source": self.loc_per_source,
            "sweep": self.sweep,
            "out_dir": self.out_dir,
            "seed": self.seed,
        }


_TOP_LEVEL_KEYS = frozenset(PipelineConfig().to_dict())


def config_from_dict(data: Mapping) -> PipelineConfig:
    """Build and validate a config from a plain JSON-style dict."""
    unknown = set(data) - _TOP_LEVEL_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    d = dict(data)
    image_level = int(d.get("image_level", 8))
    patch_level = int(d.get("patch_level", 12))
    feature_dim = int(d.get("feature_dim", 116))
    if not 0 <= image_level < patch_level <= 30:
        raise ValueError("need 0 <= image_level < patch_level <= 30")
    grid = 1 << (patch_level - image_level)
    mae_dict = dict(d.get("mae") or {})
    if "grid" in mae_dict and int(mae_dict["grid"]) != grid:
        raise ValueError(f"mae grid {mae_dict['grid']} conflicts with the "
                         f"levels (expected {grid})")
    if "feature_dim" in mae_dict \
            and int(mae_dict["feature_dim"]) != feature_dim:
        raise ValueError("mae feature_dim conflicts with feature_dim")
    mae_dict.update(feature_dim=feature_dim, grid=grid)
    try:
        mae = MaeConfig(**mae_dict)
        probe = ProbeConfig(**(d.get("probe") or {}))
        fusion = FusionSpec(**(d.get("fusion") or {}))
    except TypeError as exc:
        raise ValueError(f"bad config section: {exc}") from None
    return PipelineConfig(
        features=d.get("features"), labels=d.get("labels"),
        externals=tuple(d.get("externals") or ()),
        region=d.get("region"),
        image_level=image_level, patch_level=patch_level,
        feature_dim=feature_dim,
        min_present=float(d.get("min_present", 0.0)),
        embed_mode=d.get("embed_mode", "patch"),
        mae=mae, probe=probe, fusion=fusion,
        split_kind=d.get("split_kind", "random"),
        split_fractions=tuple(d.get("split_fractions", (0.6, 0.2, 0.2))),
        split_seed=int(d.get("split_seed", 0)),
        eval_seeds=tuple(d.get("eval_seeds", (0, 1, 2, 3, 4))),
        include_location=bool(d.get("include_location", False)),
        loc_per_source=bool(d.get("loc_per_source", False)),
        sweep=bool(d.get("sweep", False)),
        out_dir=d.get("out_dir", "artifacts"),
        seed=int(d.get("seed", 0)))


def _merge(base: dict, overrides: Mapping) -> dict:
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        elif isinstance(value, Mapping):
            out[key] = dict(value)
        else:
            out[key] = value
    return out


def config_from_sources(config_path: str | Path | None,
                        overrides: Mapping | None = None) -> PipelineConfig:
    """Defaults, then the JSON config file, then explicit overrides."""
    base: dict = {}
    if config_path is not None:
        try:
            base = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{config_path}: bad JSON: {exc}") from None
        if not isinstance(base, dict):
            raise ValueError(f"{config_path}: config must be a JSON object")
    return config_from_dict(_merge(base, overrides or {}))


def config_hash(cfg: PipelineConfig) -> str:
    """Content hash binding artifacts to the settings that made them.

    The output directory is excluded so runs into different directories
    stay byte-identical.
    """
    payload = cfg.to_dict()
    del payload["out_dir"]
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# -- stages ----------------------------------------------------------------


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ValueError(f"{path} is missing; run the {producer} stage first")
    return path


def _stage_ingest(cfg: PipelineConfig, out: Path, log: Logger) -> None:
    if not cfg.features:
        raise ValueError("no feature input path configured")
    records = load_features(cfg.features)
    if not records:
        raise ValueError(f"{cfg.features} contains no records")
    level = records[0].cell().level()
    if level != cfg.patch_level:
        raise ValueError(f"feature cells are level {level}, expected "
                         f"patch_level {cfg.patch_level}")
    if records[0].counts.size != cfg.feature_dim:
        raise ValueError(f"features have {records[0].counts.size} counts, "
                         f"expected feature_dim {cfg.feature_dim}")
    write_features(out / "features.jsonl", records)
    log(f"[ingest] {len(records)} cells validated")


def _stage_stats(cfg: PipelineConfig, out: Path, log: Logger) -> None:
    records = load_features(_require(out / "features.jsonl", "ingest"))
    stats = fit_norm_stats(records)
    stats.save(out / "norm_stats.json")
    log(f"[stats] fitted on {stats.count} cells, {stats.dim} features")


def _stage_rasterize(cfg: PipelineConfig, out: Path, log: Logger) -> None:
    records = load_features(_require(out / "features.jsonl", "ingest"))
    stats = NormStats.load(_require(out / "norm_stats.json", "stats"))
    dataset = build_dataset(records, stats, cfg.image_level, cfg.patch_level,
                            cfg.min_present)
    if not dataset.images:
        raise ValueError("rasterization produced no images; lower min_present")
    save_dataset(out / "dataset.bin", dataset)
    log(f"[rasterize] {len(dataset.images)} images of "
        f"{dataset.grid_size}x{dataset.grid_size} patches")


def _stage_pretrain(cfg: PipelineConfig, out: Path, log: Logger) -> None:
    dataset = load_dataset(_require(out / "dataset.bin", "rasterize"))

    def progress(epoch: int, loss: float) -> None:
        log(f"[pretrain] epoch {epoch + 1}/{cfg.mae.epochs} "
            f"loss {loss:.6f}")

    params, history = pretrain(dataset, cfg.mae, cfg.seed, progress=progress)
    save_params(out / "model.ckpt", params, cfg.mae)
    (out / "history.json").write_text(json.dumps(history))


def _stage_embed(cfg: PipelineConfig, out: Path, log: Logger) -> None:
    params, mae_cfg = load_params(_require(out / "model.ckpt", "pretrain"))
    chash = config_hash(cfg)
    ckpt_hash = file_hash(out / "model.ckpt")
    if cfg.embed_mode == "patch":
        records = load_features(_require(out / "features.jsonl", "ingest"))
        stats = NormStats.load(_require(out / "norm_stats.json", "stats"))
        table = extract_embeddings(records, stats, params,
                                   config_hash=chash,
                                   checkpoint_hash=ckpt_hash)
    else:
        dataset = load_dataset(_require(out / "dataset.bin", "rasterize"))
        if cfg.embed_mode == "contextual":
            table = extract_embeddings_contextual(
                dataset, params, mae_cfg,
                config_hash=chash, checkpoint_hash=ckpt_hash)
        else:
            pooled = extract_image_embeddings(dataset, params, mae_cfg)
            table = EmbeddingTable(entries=pooled.entries, dim=pooled.dim,
                                   config_hash=chash,
                                   checkpoint_hash=ckpt_hash)
    table.save(out / "embeddings.bin")
    log(f"[embed] {len(table)} {cfg.embed_mode} embeddings of dim {table.dim}")


def _stage_eval(cfg: PipelineConfig, out: Path, log: Logger) -> None:
    if not cfg.labels:
        raise ValueError("no label input path configured")
    table = EmbeddingTable.load(_require(out / "embeddings.bin", "embed"))
    chash = config_hash(cfg)
    if table.config_hash is not None and table.config_hash != chash:
        log(f"[eval] warning: embeddings were built under config "
            f"{table.config_hash}, current is {chash} (stale artifacts)")
    label_level = cfg.image_level if cfg.embed_mode == "image" \
        else cfg.patch_level
    cells = load_labels(cfg.labels, label_level)
    tables = [table] + [load_external_embeddings(p, label_level)
                        for p in cfg.externals]
    cells = covered_cells(cells, tables)
    if len(cells) < 10:
        raise ValueError(f"only {len(cells)} labeled cells are covered by "
                         "every embedding source; need at least 10")
    region = None
    if cfg.split_kind == "geographic":
        if cfg.region is None:
            raise ValueError("geographic split needs a region file")
        region = load_region(cfg.region)
    split = SplitSpec(kind=cfg.split_kind,
                      fractions=cfg.split_fractions,
                      region=region, seed=cfg.split_seed)
    grid = probe_grid(base=cfg.probe) if cfg.sweep else [cfg.probe]
    report = sweep_and_evaluate(
        cells, tables, split, seeds=cfg.eval_seeds, grid=grid,
        fusion=cfg.fusion, include_location=cfg.include_location,
        loc_per_source=cfg.loc_per_source, config_hash=chash)
    (out / "eval_report.json").write_text(report.to_json())
    (out / "eval_report.tsv").write_text(report.to_tsv())
    log(f"[eval] {len(cells)} cells, R^2 {report.r2_mean:.4f} "
        f"+/- {report.r2_std:.4f}, MAE {report.mae_mean:.4f}")


_STAGE_FUNCS: dict[str, Callable[[PipelineConfig, Path, Logger], None]] = {
    "ingest": _stage_ingest,
    "stats": _stage_stats,
    "rasterize": _stage_rasterize,
    "pretrain": _stage_pretrain,
    "embed": _stage_embed,
    "eval": _stage_eval,
}


# -- orchestration ---------------------------------------------------------


def _load_manifest(path: Path) -> dict | None:
    if not path.exists():
        return None
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError:
        return None
    if not isinstance(manifest, dict) or "stages" not in manifest:
        return None
    return manifest


def run_pipeline(cfg: PipelineConfig,
                 stages: Sequence[str] | None = None,
                 log: Logger | None = None) -> dict[str, list[Path]]:
    """Execute the requested stages (default: all applicable), skipping
    any whose outputs already exist under the current config hash.
    Returns the output paths per executed-or-current stage.
    """
    log = log or (lambda message: None)
    if stages is None:
        wanted = [s for s in STAGE_ORDER
                  if s != "eval" or cfg.labels is not None]
    else:
        unknown = set(stages) - set(STAGE_ORDER)
        if unknown:
            raise ValueError(f"unknown stages: {sorted(unknown)}")
        wanted = [s for s in STAGE_ORDER if s in set(stages)]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    manifest_path = out / "manifest.json"
    manifest = _load_manifest(manifest_path)
    if manifest is None:
        manifest = {"config_hash": chash, "stages": {}}
    elif manifest.get("config_hash") != chash:
        log(f"[pipeline] warning: existing artifacts were built under "
            f"config {manifest.get('config_hash')}, current is {chash}; "
            f"they are stale and the requested stages will rerun")
        manifest = {"config_hash": chash, "stages": {}}

    results: dict[str, list[Path]] = {}
    for stage in wanted:
        outputs = [out / name for name in ARTIFACTS[stage]]
        if stage in manifest["stages"] and all(p.exists() for p in outputs):
            log(f"[{stage}] up to date")
            results[stage] = outputs
            continue
        try:
            _STAGE_FUNCS[stage](cfg, out, log)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        missing = [p for p in outputs if not p.exists()]
        if missing:
            raise StageError(stage, RuntimeError(
                f"expected outputs not produced: {missing}"))
        manifest["stages"][stage] = {
            "outputs": {p.name: file_hash(p) for p in outputs}}
        manifest_path.write_text(json.dumps(manifest, sort_keys=True,
                                            indent=2))
        results[stage] = outputs
    return results


def load_report(out_dir: str | Path) -> EvalReport:
    return EvalReport.from_json(
        Path(Path(out_dir) / "eval_report.json").read_text())
