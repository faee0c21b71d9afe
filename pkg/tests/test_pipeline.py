"""Tests for pipeline orchestration, config handling, and resumability."""
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from s2embed.embeddings import EmbeddingTable
from s2embed.mae import MaeConfig
from s2embed.pipeline import (
    ARTIFACTS,
    PipelineConfig,
    StageError,
    config_from_dict,
    config_from_sources,
    config_hash,
    file_hash,
    load_report,
    run_pipeline,
)
from s2embed.s2geom import CellId
from s2embed.synth import SynthSpec, generate

TINY_MAE = {"encoder_dim": 16, "decoder_dim": 8, "encoder_layers": 1,
            "decoder_layers": 1, "heads": 2, "epochs": 2, "batch_size": 4,
            "shuffle_buffer": 8, "dropout": 0.0}
TINY_PROBE = {"hidden_units": 8, "learning_rate": 1e-2, "max_epochs": 12,
              "patience": 4}


def tiny_config(world: Path, out: Path, **extra) -> PipelineConfig:
    base = {
        "features": str(world / "features.jsonl"),
        "labels": str(world / "labels.jsonl"),
        "image_level": 6, "patch_level": 8, "feature_dim": 6,
        "mae": dict(TINY_MAE), "probe": dict(TINY_PROBE),
        "eval_seeds": [0, 1], "out_dir": str(out), "seed": 5,
    }
    base.update(extra)
    return config_from_dict(base)


@pytest.fixture(scope="module")
def world(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("world")
    spec = SynthSpec(seed=11, box=(5.0, 10.0, 5.0, 10.0), feature_dim=6,
                     image_level=6, patch_level=8, latent_count=3,
                     external_dim=4)
    generate(spec, path)
    return path


@pytest.fixture(scope="module")
def completed(world, tmp_path_factory) -> tuple[PipelineConfig, Path]:
    out = tmp_path_factory.mktemp("artifacts")
    cfg = tiny_config(world, out)
    run_pipeline(cfg)
    return cfg, out


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.grid == 16
        assert cfg.mae.grid == 16
        assert cfg.mae.feature_dim == 116
        assert cfg.embed_mode == "patch"

    def test_grid_derived_from_levels(self):
        cfg = config_from_dict({"image_level": 6, "patch_level": 9})
        assert cfg.grid == 8
        assert cfg.mae.grid == 8

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            config_from_dict({"grid": 4})

    def test_unknown_section_field_rejected(self):
        with pytest.raises(ValueError, match="bad config section"):
            config_from_dict({"mae": {"novel_option": 1}})

    def test_conflicting_mae_grid_rejected(self):
        with pytest.raises(ValueError, match="grid"):
            config_from_dict({"image_level": 6, "patch_level": 9,
                              "mae": {"grid": 16}})

    def test_bad_levels_rejected(self):
        with pytest.raises(ValueError):
            config_from_dict({"image_level": 9, "patch_level": 9})
        with pytest.raises(ValueError):
            PipelineConfig(image_level=12, patch_level=8)

    def test_bad_embed_mode_rejected(self):
        with pytest.raises(ValueError):
            PipelineConfig(embed_mode="mean")

    def test_empty_eval_seeds_rejected(self):
        with pytest.raises(ValueError):
            PipelineConfig(eval_seeds=())

    def test_file_plus_overrides_precedence(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 1, "feature_dim": 8,
                                    "mae": {"epochs": 9, "heads": 4}}))
        cfg = config_from_sources(path, {"seed": 2, "mae": {"epochs": 3}})
        assert cfg.seed == 2
        assert cfg.feature_dim == 8
        assert cfg.mae.epochs == 3
        assert cfg.mae.heads == 4

    def test_bad_config_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("not json")
        with pytest.raises(ValueError, match="bad JSON"):
            config_from_sources(path)
        path.write_text("[1, 2]")
        with pytest.raises(ValueError, match="JSON object"):
            config_from_sources(path)


class TestConfigHash:
    def test_out_dir_excluded(self):
        a = PipelineConfig(out_dir="x")
        b = PipelineConfig(out_dir="y")
        assert config_hash(a) == config_hash(b)

    def test_sensitive_to_settings(self):
        base = PipelineConfig()
        assert config_hash(base) != config_hash(PipelineConfig(seed=1))
        assert config_hash(base) != config_hash(
            PipelineConfig(embed_mode="contextual"))
        assert config_hash(base) != config_hash(
            PipelineConfig(mae=MaeConfig(feature_dim=116, grid=16, epochs=3)))

    def test_stable_format(self):
        h = config_hash(PipelineConfig())
        assert len(h) == 16
        assert all(c in "0123456789abcdef" for c in h)


class TestStageErrors:
    def test_missing_features_path(self, tmp_path):
        cfg = PipelineConfig(out_dir=str(tmp_path))
        with pytest.raises(StageError, match="ingest stage failed") as info:
            run_pipeline(cfg, stages=["ingest"])
        assert info.value.is_validation

    def test_missing_feature_file(self, tmp_path):
        cfg = PipelineConfig(features=str(tmp_path / "nope.jsonl"),
                             out_dir=str(tmp_path))
        with pytest.raises(StageError, match="ingest stage failed") as info:
            run_pipeline(cfg, stages=["ingest"])
        assert info.value.is_validation

    def test_stage_needs_upstream_artifact(self, world, tmp_path):
        cfg = tiny_config(world, tmp_path)
        with pytest.raises(StageError, match="run the ingest stage first"):
            run_pipeline(cfg, stages=["stats"])

    def test_level_mismatch_names_ingest(self, world, tmp_path):
        cfg = tiny_config(world, tmp_path, patch_level=9, mae=dict(
            TINY_MAE, grid=8))
        with pytest.raises(StageError, match="ingest stage failed: feature "
                                             "cells are level 8"):
            run_pipeline(cfg, stages=["ingest"])

    def test_unknown_stage_rejected(self, world, tmp_path):
        cfg = tiny_config(world, tmp_path)
        with pytest.raises(ValueError, match="unknown stages"):
            run_pipeline(cfg, stages=["deploy"])


class TestFullRun:
    def test_all_artifacts_exist(self, completed):
        _, out = completed
        for names in ARTIFACTS.values():
            for name in names:
                assert (out / name).exists(), name

    def test_manifest_records_all_stages(self, completed):
        cfg, out = completed
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_hash"] == config_hash(cfg)
        assert set(manifest["stages"]) == set(ARTIFACTS)
        for stage, names in ARTIFACTS.items():
            recorded = manifest["stages"][stage]["outputs"]
            assert set(recorded) == set(names)
            for name in names:
                assert recorded[name] == file_hash(out / name)

    def test_embeddings_carry_config_hash(self, completed):
        cfg, out = completed
        table = EmbeddingTable.load(out / "embeddings.bin")
        assert table.config_hash == config_hash(cfg)
        assert table.checkpoint_hash == file_hash(out / "model.ckpt")
        assert table.dim == cfg.mae.encoder_dim

    def test_report_loadable_with_hash(self, completed):
        cfg, out = completed
        report = load_report(out)
        assert report.config_hash == config_hash(cfg)
        assert report.seeds == list(cfg.eval_seeds)
        assert (out / "eval_report.tsv").read_text().startswith("seed\t")

    def test_history_length_matches_epochs(self, completed):
        cfg, out = completed
        history = json.loads((out / "history.json").read_text())
        assert len(history) == cfg.mae.epochs

    def test_second_run_skips_everything(self, completed):
        cfg, out = completed
        lines: list[str] = []
        run_pipeline(cfg, log=lines.append)
        assert all("up to date" in line for line in lines)
        assert len(lines) == len(ARTIFACTS)


class TestResumability:
    def copy_artifacts(self, out: Path, tmp_path: Path,
                       world: Path) -> tuple[PipelineConfig, Path]:
        workdir = tmp_path / "copy"
        shutil.copytree(out, workdir)
        return tiny_config(world, workdir), workdir

    def test_deleted_final_artifact_regenerated_identically(
            self, completed, world, tmp_path):
        _, out = completed
        cfg, workdir = self.copy_artifacts(out, tmp_path, world)
        reference = (workdir / "embeddings.bin").read_bytes()
        (workdir / "embeddings.bin").unlink()
        lines: list[str] = []
        run_pipeline(cfg, log=lines.append)
        ran = [l for l in lines if "up to date" not in l]
        assert any("[embed]" in l for l in ran)
        assert not any("[pretrain]" in l for l in ran)
        assert (workdir / "embeddings.bin").read_bytes() == reference

    def test_stale_config_hash_warns_and_reruns(self, completed, world,
                                                tmp_path):
        _, out = completed
        cfg, workdir = self.copy_artifacts(out, tmp_path, world)
        changed = tiny_config(world, workdir, seed=cfg.seed + 1)
        lines: list[str] = []
        run_pipeline(changed, stages=["pretrain"], log=lines.append)
        assert any("stale" in l for l in lines)
        manifest = json.loads((workdir / "manifest.json").read_text())
        assert manifest["config_hash"] == config_hash(changed)
        assert set(manifest["stages"]) == {"pretrain"}

    def test_reproducible_across_directories(self, world, tmp_path):
        outs = []
        for name in ("first", "second"):
            cfg = tiny_config(world, tmp_path / name)
            run_pipeline(cfg)
            outs.append(tmp_path / name)
        for name in ("embeddings.bin", "embeddings.bin.meta.json",
                     "eval_report.json", "eval_report.tsv", "model.ckpt"):
            assert (outs[0] / name).read_bytes() \
                == (outs[1] / name).read_bytes(), name


class TestEmbedModes:
    def test_contextual_differs_from_patch(self, completed, world, tmp_path):
        _, out = completed
        workdir = tmp_path / "ctx"
        shutil.copytree(out, workdir)
        patch_bytes = (workdir / "embeddings.bin").read_bytes()
        cfg = tiny_config(world, workdir, embed_mode="contextual")
        run_pipeline(cfg, stages=["embed"])
        table = EmbeddingTable.load(workdir / "embeddings.bin")
        assert (workdir / "embeddings.bin").read_bytes() != patch_bytes
        assert table.dim == cfg.mae.encoder_dim

    def test_image_mode_keys_image_cells(self, completed, world, tmp_path):
        _, out = completed
        workdir = tmp_path / "img"
        shutil.copytree(out, workdir)
        cfg = tiny_config(world, workdir, embed_mode="image")
        run_pipeline(cfg, stages=["embed"])
        table = EmbeddingTable.load(workdir / "embeddings.bin")
        levels = {CellId(raw).level() for raw in table.entries}
        assert levels == {cfg.image_level}

    def test_image_mode_eval_uses_image_level_labels(self, completed, world,
                                                     tmp_path):
        _, out = completed
        workdir = tmp_path / "imgeval"
        shutil.copytree(out, workdir)
        cfg = tiny_config(world, workdir, embed_mode="image",
                          eval_seeds=[0])
        run_pipeline(cfg, stages=["embed"])
        manifest = json.loads((workdir / "manifest.json").read_text())
        images = len(EmbeddingTable.load(workdir / "embeddings.bin"))
        if images >= 10:
            run_pipeline(cfg, stages=["eval"])
            report = load_report(workdir)
            assert len(report.seeds) == 1
        else:
            with pytest.raises(StageError, match="covered"):
                run_pipeline(cfg, stages=["eval"])


class TestEvalVariants:
    def test_external_source_and_fusion(self, completed, world, tmp_path):
        _, out = completed
        workdir = tmp_path / "fuse"
        shutil.copytree(out, workdir)
        cfg = tiny_config(
            world, workdir,
            externals=[str(world / "external.jsonl")],
            fusion={"mode": "project-add", "projection_dim": 8},
            eval_seeds=[0])
        run_pipeline(cfg, stages=["eval"])
        report = load_report(workdir)
        assert report.fusion_mode == "project-add"

    def test_geographic_split(self, completed, world, tmp_path):
        _, out = completed
        workdir = tmp_path / "geo"
        shutil.copytree(out, workdir)
        region_path = tmp_path / "region.json"
        region_path.write_text(json.dumps(
            {"ring": [[5.0, 7.5], [5.0, 10.0], [10.0, 10.0], [10.0, 7.5]]}))
        cfg = tiny_config(world, workdir, split_kind="geographic",
                          region=str(region_path), eval_seeds=[0])
        run_pipeline(cfg, stages=["eval"])
        report = load_report(workdir)
        assert report.split_kind == "geographic"

    def test_geographic_without_region_fails(self, completed, world,
                                             tmp_path):
        _, out = completed
        workdir = tmp_path / "geonone"
        shutil.copytree(out, workdir)
        cfg = tiny_config(world, workdir, split_kind="geographic",
                          eval_seeds=[0])
        with pytest.raises(StageError, match="region") as info:
            run_pipeline(cfg, stages=["eval"])
        assert info.value.is_validation

    def test_stale_embedding_hash_warns(self, completed, world, tmp_path):
        _, out = completed
        workdir = tmp_path / "stalemb"
        shutil.copytree(out, workdir)
        (workdir / "manifest.json").unlink()
        cfg = tiny_config(world, workdir, eval_seeds=[0],
                          include_location=True)
        lines: list[str] = []
        run_pipeline(cfg, stages=["eval"], log=lines.append)
        assert any("stale" in l for l in lines)
        assert load_report(workdir).include_location
