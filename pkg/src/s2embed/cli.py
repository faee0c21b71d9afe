"""Command-line interface.

Each subcommand drives one pipeline stage; `run` chains them all.
Settings come from defaults, then an optional JSON config file, then
individual flags, in that order. Exit codes: 0 success, 1 validation
error, 2 runtime failure.
"""
from __future__ import annotations

import contextlib
import sys

import click

from .pipeline import (
    EMBED_MODES,
    PipelineConfig,
    StageError,
    config_from_sources,
    config_hash,
    run_pipeline,
)
from .synth import SynthSpec, generate


def _common(func):
    func = click.option("--config", "config_path", type=click.Path(),
                        default=None, help="JSON config file.")(func)
    func = click.option("--out", "out_dir", type=click.Path(), default=None,
                        help="Artifact directory.")(func)
    func = click.option("--seed", type=int, default=None,
                        help="Master seed.")(func)
    func = click.option("--threads", type=int, default=None,
                        help="Cap numeric library threads (1 = "
                             "bit-reproducible).")(func)
    return func


def _level_options(func):
    func = click.option("--image-level", type=int, default=None,
                        help="Level of the image cells.")(func)
    func = click.option("--patch-level", type=int, default=None,
                        help="Level of the patch cells.")(func)
    func = click.option("--feature-dim", type=int, default=None,
                        help="Features per cell.")(func)
    return func


def _thread_limit(threads: int | None):
    if threads is None:
        return contextlib.nullcontext()
    if threads < 1:
        raise ValueError("threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def _overrides(**pairs) -> dict:
    """Keep only the flags the user actually set."""
    out: dict = {}
    for key, value in pairs.items():
        if value is None or value == ():
            continue
        section, _, name = key.partition("__")
        if name:
            out.setdefault(section, {})[name] = value
        else:
            out[key] = value
    return out


def _build_config(config_path, **pairs) -> PipelineConfig:
    return config_from_sources(config_path, _overrides(**pairs))


def _parse_seed_list(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    try:
        seeds = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ValueError(f"bad seed list {text!r}; use e.g. 0,1,2") from None
    if not seeds:
        raise ValueError("seed list is empty")
    return seeds


@click.group()
def cli() -> None:
    """Geospatial cell embeddings: data prep, pretraining, evaluation."""


@cli.command()
@click.option("--out", "out_dir", type=click.Path(), required=True,
              help="Directory for the generated files.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--box", nargs=4, type=float, default=(5.0, 10.0, 5.0, 10.0),
              show_default=True, metavar="LAT_MIN LAT_MAX LNG_MIN LNG_MAX")
@click.option("--latents", type=int, default=4, show_default=True,
              help="Number of latent spatial fields.")
@click.option("--smoothness", type=float, default=2.0, show_default=True,
              help="Minimum field wavelength in degrees.")
@click.option("--feature-dim", type=int, default=116, show_default=True)
@click.option("--noise", type=float, default=0.1, show_default=True)
@click.option("--image-level", type=int, default=8, show_default=True)
@click.option("--patch-level", type=int, default=12, show_default=True)
@click.option("--external-dim", type=int, default=8, show_default=True)
def synth(out_dir, seed, box, latents, smoothness, feature_dim, noise,
          image_level, patch_level, external_dim) -> None:
    """Generate a synthetic feature/label/external-embedding world."""
    spec = SynthSpec(seed=seed, box=tuple(box), latent_count=latents,
                     smoothness=smoothness, feature_dim=feature_dim,
                     noise=noise, image_level=image_level,
                     patch_level=patch_level, external_dim=external_dim)
    summary = generate(spec, out_dir)
    click.echo(f"[synth] {summary.cell_count} cells in "
               f"{summary.image_count} images; latent-oracle R^2 "
               f"{summary.oracle_r2:.4f}")


@cli.command()
@_common
@_level_options
@click.option("--features", type=click.Path(), default=None,
              help="Input feature JSONL.")
def ingest(config_path, out_dir, seed, threads, features, image_level,
           patch_level, feature_dim) -> None:
    """Validate raw per-cell features into the canonical form."""
    cfg = _build_config(config_path, features=features, out_dir=out_dir,
                        seed=seed, image_level=image_level,
                        patch_level=patch_level, feature_dim=feature_dim)
    with _thread_limit(threads):
        run_pipeline(cfg, stages=["ingest"], log=click.echo)


@cli.command()
@_common
@_level_options
def stats(config_path, out_dir, seed, threads, image_level, patch_level,
          feature_dim) -> None:
    """Fit global normalization statistics over the ingested cells."""
    cfg = _build_config(config_path, out_dir=out_dir, seed=seed,
                        image_level=image_level, patch_level=patch_level,
                        feature_dim=feature_dim)
    with _thread_limit(threads):
        run_pipeline(cfg, stages=["stats"], log=click.echo)


@cli.command()
@_common
@_level_options
@click.option("--min-present", type=float, default=None,
              help="Drop images with a lower present-cell fraction.")
def rasterize(config_path, out_dir, seed, threads, image_level, patch_level,
              feature_dim, min_present) -> None:
    """Arrange normalized cells into per-image feature grids."""
    cfg = _build_config(config_path, out_dir=out_dir, seed=seed,
                        image_level=image_level, patch_level=patch_level,
                        feature_dim=feature_dim, min_present=min_present)
    with _thread_limit(threads):
        run_pipeline(cfg, stages=["rasterize"], log=click.echo)


@cli.command()
@_common
@_level_options
@click.option("--epochs", "mae__epochs", type=int, default=None)
@click.option("--batch-size", "mae__batch_size", type=int, default=None)
@click.option("--mask-ratio", "mae__mask_ratio", type=float, default=None)
@click.option("--lr", "mae__learning_rate", type=float, default=None)
@click.option("--encoder-dim", "mae__encoder_dim", type=int, default=None)
@click.option("--decoder-dim", "mae__decoder_dim", type=int, default=None)
@click.option("--encoder-layers", "mae__encoder_layers", type=int,
              default=None)
@click.option("--decoder-layers", "mae__decoder_layers", type=int,
              default=None)
@click.option("--heads", "mae__heads", type=int, default=None)
def pretrain(config_path, out_dir, seed, threads, image_level, patch_level,
             feature_dim, **mae_flags) -> None:
    """Train the masked autoencoder on the rasterized dataset."""
    cfg = _build_config(config_path, out_dir=out_dir, seed=seed,
                        image_level=image_level, patch_level=patch_level,
                        feature_dim=feature_dim, **mae_flags)
    with _thread_limit(threads):
        run_pipeline(cfg, stages=["pretrain"], log=click.echo)


@cli.command()
@_common
@_level_options
@click.option("--embed-mode", type=click.Choice(EMBED_MODES), default=None,
              help="patch: projection only; contextual: full encoder; "
                   "image: mean-pooled per image cell.")
def embed(config_path, out_dir, seed, threads, image_level, patch_level,
          feature_dim, embed_mode) -> None:
    """Extract per-cell embeddings from the trained model."""
    cfg = _build_config(config_path, out_dir=out_dir, seed=seed,
                        image_level=image_level, patch_level=patch_level,
                        feature_dim=feature_dim, embed_mode=embed_mode)
    with _thread_limit(threads):
        run_pipeline(cfg, stages=["embed"], log=click.echo)


def _eval_options(func):
    func = click.option("--labels", type=click.Path(), default=None,
                        help="Label JSONL.")(func)
    func = click.option("--external", "externals", type=click.Path(),
                        multiple=True,
                        help="Extra embedding source (repeatable).")(func)
    func = click.option("--fusion", "fusion__mode",
                        type=click.Choice(["concat", "weighted-add",
                                           "project-add"]),
                        default=None)(func)
    func = click.option("--projection-dim", "fusion__projection_dim",
                        type=int, default=None)(func)
    func = click.option("--split", "split_kind",
                        type=click.Choice(["random", "geographic"]),
                        default=None)(func)
    func = click.option("--region", type=click.Path(), default=None,
                        help="Holdout region JSON for geographic "
                             "splits.")(func)
    func = click.option("--split-seed", type=int, default=None)(func)
    func = click.option("--eval-seeds", type=str, default=None,
                        help="Comma-separated probe seeds, e.g. "
                             "0,1,2,3,4.")(func)
    func = click.option("--include-location", is_flag=True, default=None,
                        help="Append the location encoding after "
                             "fusion.")(func)
    func = click.option("--loc-per-source", is_flag=True, default=None,
                        help="Append the location encoding to every "
                             "source before fusion.")(func)
    func = click.option("--sweep", is_flag=True, default=None,
                        help="Search the probe hyperparameter grid.")(func)
    func = click.option("--hidden", "probe__hidden_units", type=int,
                        default=None)(func)
    func = click.option("--probe-lr", "probe__learning_rate", type=float,
                        default=None)(func)
    func = click.option("--probe-dropout", "probe__dropout", type=float,
                        default=None)(func)
    func = click.option("--max-epochs", "probe__max_epochs", type=int,
                        default=None)(func)
    func = click.option("--patience", "probe__patience", type=int,
                        default=None)(func)
    return func


@cli.command(name="eval")
@_common
@_level_options
@click.option("--embed-mode", type=click.Choice(EMBED_MODES), default=None)
@_eval_options
def eval_cmd(config_path, out_dir, seed, threads, image_level, patch_level,
             feature_dim, embed_mode, labels, externals, region, split_kind,
             split_seed, eval_seeds, include_location, loc_per_source, sweep,
             **section_flags) -> None:
    """Probe the embeddings against labels and report R^2 and MAE."""
    cfg = _build_config(config_path, out_dir=out_dir, seed=seed,
                        image_level=image_level, patch_level=patch_level,
                        feature_dim=feature_dim, embed_mode=embed_mode,
                        labels=labels, externals=tuple(externals),
                        region=region, split_kind=split_kind,
                        split_seed=split_seed,
                        eval_seeds=_parse_seed_list(eval_seeds),
                        include_location=include_location,
                        loc_per_source=loc_per_source, sweep=sweep,
                        **section_flags)
    with _thread_limit(threads):
        run_pipeline(cfg, stages=["eval"], log=click.echo)


@cli.command()
@_common
@_level_options
@click.option("--features", type=click.Path(), default=None)
@click.option("--min-present", type=float, default=None)
@click.option("--embed-mode", type=click.Choice(EMBED_MODES), default=None)
@click.option("--epochs", "mae__epochs", type=int, default=None)
@click.option("--batch-size", "mae__batch_size", type=int, default=None)
@_eval_options
def run(config_path, out_dir, seed, threads, image_level, patch_level,
        feature_dim, features, min_present, embed_mode, labels, externals,
        region, split_kind, split_seed, eval_seeds, include_location,
        loc_per_source, sweep, **section_flags) -> None:
    """Run every stage in order; eval runs only when labels are set."""
    cfg = _build_config(config_path, out_dir=out_dir, seed=seed,
                        image_level=image_level, patch_level=patch_level,
                        feature_dim=feature_dim, features=features,
                        min_present=min_present, embed_mode=embed_mode,
                        labels=labels, externals=tuple(externals),
                        region=region, split_kind=split_kind,
                        split_seed=split_seed,
                        eval_seeds=_parse_seed_list(eval_seeds),
                        include_location=include_location,
                        loc_per_source=loc_per_source, sweep=sweep,
                        **section_flags)
    with _thread_limit(threads):
        run_pipeline(cfg, log=click.echo)
    click.echo(f"[pipeline] done (config {config_hash(cfg)})")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="s2embed", standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.UsageError as exc:
        exc.show()
        return 1
    except StageError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1 if exc.is_validation else 2
    except (ValueError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # pragma: no cover - final safety net
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
