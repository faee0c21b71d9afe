"""Tests for the command-line interface."""
import json
from pathlib import Path

import pytest

from s2embed.cli import main
from s2embed.downstream import EvalReport
from s2embed.embeddings import EmbeddingTable

TINY_MAE = {"encoder_dim": 16, "decoder_dim": 8, "encoder_layers": 1,
            "decoder_layers": 1, "heads": 2, "epochs": 2, "batch_size": 4,
            "shuffle_buffer": 8, "dropout": 0.0}
TINY_PROBE = {"hidden_units": 8, "learning_rate": 1e-2, "max_epochs": 12,
              "patience": 4}


@pytest.fixture(scope="module")
def world(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("cliworld")
    code = main(["synth", "--out", str(path), "--seed", "11",
                 "--box", "5", "10", "5", "10", "--feature-dim", "6",
                 "--image-level", "6", "--patch-level", "8",
                 "--external-dim", "4"])
    assert code == 0
    return path


@pytest.fixture(scope="module")
def config_file(world, tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("clicfg") / "config.json"
    path.write_text(json.dumps({
        "features": str(world / "features.jsonl"),
        "labels": str(world / "labels.jsonl"),
        "image_level": 6, "patch_level": 8, "feature_dim": 6,
        "mae": TINY_MAE, "probe": TINY_PROBE, "eval_seeds": [0, 1],
        "seed": 5,
    }))
    return path


class TestBasics:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "Usage" in capsys.readouterr().out

    def test_subcommand_help_exits_zero(self):
        for command in ("synth", "ingest", "stats", "rasterize", "pretrain",
                        "embed", "eval", "run"):
            assert main([command, "--help"]) == 0

    def test_unknown_flag_is_validation_error(self):
        assert main(["eval", "--no-such-flag"]) == 1

    def test_unknown_command_is_validation_error(self):
        assert main(["deploy"]) == 1

    def test_bad_flag_value_is_validation_error(self):
        assert main(["synth", "--out", "/tmp/x", "--latents", "frog"]) == 1

    def test_bad_seed_list_is_validation_error(self, config_file, tmp_path):
        assert main(["eval", "--config", str(config_file),
                     "--out", str(tmp_path),
                     "--eval-seeds", "a,b"]) == 1


class TestSynthCommand:
    def test_writes_world_and_reports(self, tmp_path, capsys):
        code = main(["synth", "--out", str(tmp_path), "--seed", "3",
                     "--box", "5", "6", "5", "6", "--feature-dim", "4",
                     "--image-level", "6", "--patch-level", "7"])
        assert code == 0
        out = capsys.readouterr().out
        assert "[synth]" in out and "R^2" in out
        for name in ("features.jsonl", "labels.jsonl", "external.jsonl",
                     "synth_manifest.json"):
            assert (tmp_path / name).exists()

    def test_invalid_box_is_validation_error(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path),
                     "--box", "7", "5", "5", "6"]) == 1


@pytest.fixture(scope="module")
def arts(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("cliarts")


class TestStagedCommands:
    def test_stage_sequence(self, config_file, arts, capsys):
        for command in ("ingest", "stats", "rasterize", "pretrain", "embed"):
            code = main([command, "--config", str(config_file),
                         "--out", str(arts), "--threads", "1"])
            assert code == 0, f"{command} failed"
        out = capsys.readouterr().out
        assert "[pretrain] epoch 2/2" in out
        assert (arts / "embeddings.bin").exists()

    def test_eval_routes_fusion_split_region(self, config_file, world, arts,
                                             tmp_path):
        region = tmp_path / "region.json"
        region.write_text(json.dumps(
            {"ring": [[5.0, 7.5], [5.0, 10.0], [10.0, 10.0], [10.0, 7.5]]}))
        code = main(["eval", "--config", str(config_file),
                     "--out", str(arts),
                     "--external", str(world / "external.jsonl"),
                     "--fusion", "project-add", "--projection-dim", "8",
                     "--split", "geographic", "--region", str(region),
                     "--eval-seeds", "0"])
        assert code == 0
        report = EvalReport.from_json(
            (arts / "eval_report.json").read_text())
        assert report.fusion_mode == "project-add"
        assert report.split_kind == "geographic"

    def test_missing_upstream_artifact(self, config_file, tmp_path, capsys):
        code = main(["stats", "--config", str(config_file),
                     "--out", str(tmp_path / "empty")])
        assert code == 1
        assert "run the ingest stage first" in capsys.readouterr().err

    def test_missing_feature_file_names_ingest(self, tmp_path, capsys):
        code = main(["ingest", "--features", str(tmp_path / "nope.jsonl"),
                     "--out", str(tmp_path)])
        assert code == 1
        assert "ingest stage failed" in capsys.readouterr().err


class TestRunCommand:
    def test_full_run_and_flag_override(self, config_file, tmp_path, capsys):
        code = main(["run", "--config", str(config_file),
                     "--out", str(tmp_path), "--epochs", "1",
                     "--eval-seeds", "0", "--threads", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "[pipeline] done" in out
        history = json.loads((tmp_path / "history.json").read_text())
        assert len(history) == 1  # flag overrides the config file's epochs
        assert (tmp_path / "eval_report.tsv").exists()

    def test_embed_mode_flag_reaches_extraction(self, config_file, world,
                                                tmp_path):
        base = ["--config", str(config_file), "--eval-seeds", "0"]
        assert main(["run", *base, "--out", str(tmp_path / "a")]) == 0
        assert main(["run", *base, "--out", str(tmp_path / "b"),
                     "--embed-mode", "contextual"]) == 0
        patch_table = EmbeddingTable.load(tmp_path / "a" / "embeddings.bin")
        ctx_table = EmbeddingTable.load(tmp_path / "b" / "embeddings.bin")
        assert set(patch_table.entries) == set(ctx_table.entries)
        raws = sorted(patch_table.entries)
        assert patch_table.matrix(raws).tobytes() \
            != ctx_table.matrix(raws).tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_runtime_failure_exits_two(self, config_file, tmp_path, capsys):
        for command in ("ingest", "stats", "rasterize"):
            assert main([command, "--config", str(config_file),
                         "--out", str(tmp_path)]) == 0
        code = main(["pretrain", "--config", str(config_file),
                     "--out", str(tmp_path), "--lr", "1e30"])
        assert code == 2
        assert "pretrain stage failed" in capsys.readouterr().err
