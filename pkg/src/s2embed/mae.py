"""Masked-autoencoder pretraining over rasterized feature images.

Patches are the grid slots of a raster image, flattened row-major (slot
index = row * G + col). Each training step draws a fresh random mask per
image, runs the encoder on the visible patches only, and asks a light
decoder (with a learned token standing in for every removed patch) to
reconstruct the full grid; the loss is mean squared error over the
masked patches. Per-cell embeddings come from the trained patch
projection applied to a cell's normalized feature vector.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .embeddings import EmbeddingTable
from .ingest import CellFeatures, NormStats, apply_norm
from .nn import Tensor
from .raster import RasterDataset
from .s2geom import child_at_grid, CellId


@dataclass(frozen=True)
class MaeConfig:
    """Model and training hyperparameters."""

    feature_dim: int
    grid: int
    encoder_dim: int = 256
    decoder_dim: int = 128
    encoder_layers: int = 6
    decoder_layers: int = 2
    heads: int = 8
    mask_ratio: float = 0.75
    dropout: float = 0.2
    batch_size: int = 64
    epochs: int = 50
    shuffle_buffer: int = 1000
    learning_rate: float = 5e-4
    lr_alpha: float = 0.1
    weight_decay: float = 0.001
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_on_absent: bool = True

    def __post_init__(self) -> None:
        if self.encoder_dim % self.heads or self.decoder_dim % self.heads:
            raise ValueError("encoder and decoder dims must divide by heads")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie strictly between 0 and 1")
        if self.feature_dim < 1 or self.grid < 1:
            raise ValueError("feature_dim and grid must be positive")

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MaeConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class MaskPlan:
    """Disjoint visible/masked index sets covering all patches."""

    visible: np.ndarray
    masked: np.ndarray


def random_mask(num_patches: int, mask_ratio: float,
                rng: np.random.Generator) -> MaskPlan:
    """Uniform without-replacement mask over patch indices."""
    num_masked = int(round(mask_ratio * num_patches))
    if num_masked == 0 or num_masked == num_patches:
        raise ValueError(
            f"mask_ratio {mask_ratio} leaves no masked or no visible patches")
    order = np.argsort(rng.random(num_patches), kind="stable")
    return MaskPlan(visible=np.sort(order[num_masked:]),
                    masked=np.sort(order[:num_masked]))


def _draw_batch_masks(batch: int, num_patches: int, num_masked: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    noise = rng.random((batch, num_patches))
    order = np.argsort(noise, axis=1, kind="stable")
    return (np.sort(order[:, num_masked:], axis=1),
            np.sort(order[:, :num_masked], axis=1))


# -- parameters ------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def _block_param_specs(prefix: str, layers: int, dim: int):
    for i in range(layers):
        base = f"{prefix}.{i}"
        yield f"{base}.ln1.g", (dim,), "one"
        yield f"{base}.ln1.b", (dim,), "zero"
        yield f"{base}.attn.wq", (dim, dim), "normal"
        yield f"{base}.attn.bq", (dim,), "zero"
        yield f"{base}.attn.wk", (dim, dim), "normal"
        yield f"{base}.attn.wv", (dim, dim), "normal"
        yield f"{base}.attn.bv", (dim,), "zero"
        yield f"{base}.attn.wo", (dim, dim), "normal"
        yield f"{base}.attn.bo", (dim,), "zero"
        yield f"{base}.ln2.g", (dim,), "one"
        yield f"{base}.ln2.b", (dim,), "zero"
        yield f"{base}.mlp.w1", (dim, 4 * dim), "normal"
        yield f"{base}.mlp.b1", (4 * dim,), "zero"
        yield f"{base}.mlp.w2", (4 * dim, dim), "normal"
        yield f"{base}.mlp.b2", (dim,), "zero"


def param_specs(cfg: MaeConfig):
    """(name, shape, init kind) for every learnable tensor."""
    patches = cfg.num_patches
    yield "patch_proj.w", (cfg.feature_dim, cfg.encoder_dim), "normal"
    yield "patch_proj.b", (cfg.encoder_dim,), "zero"
    yield "enc_pos", (patches, cfg.encoder_dim), "normal"
    yield from _block_param_specs("enc", cfg.encoder_layers, cfg.encoder_dim)
    yield "dec_in.w", (cfg.encoder_dim, cfg.decoder_dim), "normal"
    yield "dec_in.b", (cfg.decoder_dim,), "zero"
    yield "mask_token", (cfg.decoder_dim,), "zero"
    yield "dec_pos", (patches, cfg.decoder_dim), "normal"
    yield from _block_param_specs("dec", cfg.decoder_layers, cfg.decoder_dim)
    yield "head.w", (cfg.decoder_dim, cfg.feature_dim), "normal"
    yield "head.b", (cfg.feature_dim,), "zero"


def init_params(cfg: MaeConfig, seed: int,
                dtype=np.float32) -> dict[str, Tensor]:
    """Deterministic initialization: truncated normal (std 0.02) for
    projections, positional tables and the mask token; ones for norm
    scales; zeros for biases and norm shifts.
    """
    return init_params_from_rng(cfg, np.random.default_rng(seed), dtype)


def init_params_from_rng(cfg: MaeConfig, rng: np.random.Generator,
                         dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, shape, kind in param_specs(cfg):
        if kind == "normal":
            data = _trunc_normal(rng, shape)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def param_count(cfg: MaeConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in param_specs(cfg))


# -- forward passes --------------------------------------------------------


def _blocks(x: Tensor, params: dict[str, Tensor], prefix: str, layers: int,
            heads: int, dropout_rate: float, rng, train: bool) -> Tensor:
    for i in range(layers):
        def p(name: str, _i=i) -> Tensor:
            return params[f"{prefix}.{_i}.{name}"]

        h = nn.layer_norm(x, p("ln1.g"), p("ln1.b"))
        x = x + nn.multihead_attention(
            h, p("attn.wq"), p("attn.bq"), p("attn.wk"), p("attn.wv"),
            p("attn.bv"), p("attn.wo"), p("attn.bo"), heads=heads,
            dropout_rate=dropout_rate, rng=rng, train=train)
        h = nn.layer_norm(x, p("ln2.g"), p("ln2.b"))
        h = nn.gelu(nn.linear(h, p("mlp.w1"), p("mlp.b1")))
        h = nn.dropout(h, dropout_rate, rng, train) if train else h
        x = x + nn.linear(h, p("mlp.w2"), p("mlp.b2"))
    return x


def validate_plan(plan: MaskPlan, num_patches: int) -> None:
    """Check the plan partitions [0, num_patches); masked may be empty."""
    visible = np.asarray(plan.visible)
    masked = np.asarray(plan.masked)
    if visible.size == 0:
        raise ValueError("mask plan must leave at least one visible patch")
    union = np.concatenate([visible, masked]) if masked.size else visible
    if (visible.size + masked.size != num_patches
            or not np.array_equal(np.sort(union), np.arange(num_patches))):
        raise ValueError(
            f"mask plan does not partition {num_patches} patch indices")


def encode_visible_batch(grids: np.ndarray, visible_idx: np.ndarray,
                         params: dict[str, Tensor], cfg: MaeConfig,
                         train: bool = False, rng=None) -> Tensor:
    """Encoder over visible patches only.

    grids: [B, S, F] patch features; visible_idx: [B, V] patch indices.
    Output latents follow visible-index order: [B, V, encoder_dim].
    """
    x = nn.gather_rows(Tensor.ensure(grids), visible_idx)
    h = nn.linear(x, params["patch_proj.w"], params["patch_proj.b"])
    h = h + nn.embedding_rows(params["enc_pos"], visible_idx)
    return _blocks(h, params, "enc", cfg.encoder_layers, cfg.heads,
                   cfg.dropout, rng, train)


def encode_visible(grid: np.ndarray, plan: MaskPlan,
                   params: dict[str, Tensor], cfg: MaeConfig,
                   train: bool = False, rng=None) -> Tensor:
    """Encode one image's visible patches; grid [S, F] -> [V, encoder_dim]."""
    grid = np.asarray(grid)
    if grid.shape != (cfg.num_patches, cfg.feature_dim):
        raise ValueError(f"grid shape {grid.shape} does not match config "
                         f"({cfg.num_patches}, {cfg.feature_dim})")
    validate_plan(plan, cfg.num_patches)
    out = encode_visible_batch(grid[None], np.asarray(plan.visible)[None],
                               params, cfg, train=train, rng=rng)
    return out.reshape(len(plan.visible), cfg.encoder_dim)


def decode_reconstruct_batch(latents: Tensor, visible_idx: np.ndarray,
                             params: dict[str, Tensor], cfg: MaeConfig,
                             train: bool = False, rng=None) -> Tensor:
    """Decoder over the full patch sequence; returns [B, S, F]."""
    y = nn.linear(latents, params["dec_in.w"], params["dec_in.b"])
    full = nn.scatter_rows_with_fill(y, visible_idx, params["mask_token"],
                                     cfg.num_patches)
    full = full + params["dec_pos"]
    full = _blocks(full, params, "dec", cfg.decoder_layers, cfg.heads,
                   cfg.dropout, rng, train)
    return nn.linear(full, params["head.w"], params["head.b"])


def decode_reconstruct(latents: Tensor, plan: MaskPlan,
                       params: dict[str, Tensor], cfg: MaeConfig,
                       train: bool = False, rng=None) -> Tensor:
    """Reconstruct one image from visible latents; returns [S, F]."""
    validate_plan(plan, cfg.num_patches)
    if latents.shape != (len(plan.visible), cfg.encoder_dim):
        raise ValueError(f"latents shape {latents.shape} does not match "
                         f"{len(plan.visible)} visible patches")
    batched = latents.reshape(1, *latents.shape)
    out = decode_reconstruct_batch(batched, np.asarray(plan.visible)[None],
                                   params, cfg, train=train, rng=rng)
    return out.reshape(cfg.num_patches, cfg.feature_dim)


def masked_mse_loss_batch(reconstruction: Tensor, targets: np.ndarray,
                          masked_idx: np.ndarray,
                          presence: np.ndarray | None = None) -> Tensor:
    """Mean squared error over masked patches, averaged over patches x F.

    When `presence` is given, absent slots are excluded from the average.
    """
    targets = np.asarray(targets)
    batch, slots, dim = targets.shape
    mask = np.zeros((batch, slots, 1), dtype=targets.dtype)
    np.put_along_axis(mask, np.asarray(masked_idx)[:, :, None], 1.0, axis=1)
    if presence is not None:
        mask = mask * presence.astype(targets.dtype)[:, :, None]
    denom = float(mask.sum()) * dim
    if denom == 0.0:
        raise ValueError("no masked patches contribute to the loss")
    # python-float scale keeps the weight in the targets' dtype
    weight = mask * (1.0 / denom)
    diff = reconstruction - Tensor(targets)
    return (diff * diff * weight).sum()


def masked_mse_loss(reconstruction: Tensor, targets: np.ndarray,
                    plan: MaskPlan,
                    presence: np.ndarray | None = None) -> Tensor:
    """Single-image masked loss; reconstruction and targets are [S, F]."""
    targets = np.asarray(targets)
    if reconstruction.shape != targets.shape:
        raise ValueError(f"reconstruction shape {reconstruction.shape} != "
                         f"target shape {targets.shape}")
    validate_plan(plan, targets.shape[0])
    if np.asarray(plan.masked).size == 0:
        raise ValueError("loss needs at least one masked patch")
    batched = reconstruction.reshape(1, *targets.shape)
    return masked_mse_loss_batch(
        batched, targets[None], np.asarray(plan.masked)[None],
        presence=None if presence is None else np.asarray(presence)[None])


# -- training --------------------------------------------------------------


def shuffle_buffer_order(n: int, buffer_size: int,
                         rng: np.random.Generator) -> list[int]:
    """Streaming shuffle: a sliding buffer emits a uniform pick as each new
    element arrives, then drains in random order. A buffer >= n is a full
    uniform shuffle.
    """
    if buffer_size < 1:
        raise ValueError("buffer_size must be >= 1")
    buffer: list[int] = []
    order: list[int] = []
    for i in range(n):
        if len(buffer) < buffer_size:
            buffer.append(i)
            continue
        j = int(rng.integers(len(buffer)))
        order.append(buffer[j])
        buffer[j] = i
    while buffer:
        j = int(rng.integers(len(buffer)))
        buffer[j], buffer[-1] = buffer[-1], buffer[j]
        order.append(buffer.pop())
    return order


def dataset_arrays(dataset: RasterDataset,
                   dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Flatten a raster dataset to [N, S, F] grids and [N, S] presence."""
    slots = dataset.grid_size * dataset.grid_size
    grids = np.stack([im.grid.reshape(slots, dataset.feature_dim)
                      for im in dataset.images]).astype(dtype)
    presence = np.stack([im.presence.reshape(slots) for im in dataset.images])
    return grids, presence


def pretrain(dataset: RasterDataset, cfg: MaeConfig, seed: int,
             progress: Callable[[int, float], None] | None = None,
             ) -> tuple[dict[str, Tensor], list[float]]:
    """Train on a raster dataset; returns parameters and per-epoch mean loss."""
    if not dataset.images:
        raise ValueError("cannot pretrain on an empty dataset")
    if dataset.grid_size != cfg.grid or dataset.feature_dim != cfg.feature_dim:
        raise ValueError("config grid/feature_dim do not match the dataset")
    grids, presence = dataset_arrays(dataset)
    n = grids.shape[0]
    num_masked = int(round(cfg.mask_ratio * cfg.num_patches))
    if num_masked == 0 or num_masked == cfg.num_patches:
        raise ValueError("mask_ratio leaves no masked or no visible patches")

    seeds = np.random.SeedSequence(seed).spawn(4)
    init_rng, shuffle_rng, mask_rng, dropout_rng = map(np.random.default_rng, seeds)
    params = init_params_from_rng(cfg, init_rng)
    names = sorted(params)
    optimizer = nn.AdamW(params, beta1=cfg.beta1, beta2=cfg.beta2,
                         eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    schedule = nn.CosineSchedule(cfg.learning_rate, cfg.lr_alpha,
                                 cfg.epochs * steps_per_epoch)
    history: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_buffer_order(n, cfg.shuffle_buffer, shuffle_rng)
        epoch_losses: list[float] = []
        for start in range(0, n, cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            xb = grids[chunk]
            visible_idx, masked_idx = _draw_batch_masks(
                len(chunk), cfg.num_patches, num_masked, mask_rng)
            latents = encode_visible_batch(xb, visible_idx, params, cfg,
                                           train=True, rng=dropout_rng)
            recon = decode_reconstruct_batch(latents, visible_idx, params,
                                             cfg, train=True, rng=dropout_rng)
            loss = masked_mse_loss_batch(
                recon, xb, masked_idx,
                presence=None if cfg.loss_on_absent else presence[chunk])
            value = loss.item()
            if not math.isfinite(value):
                raise RuntimeError(
                    f"non-finite loss {value} at epoch {epoch} step {step}")
            optimizer.zero_grad()
            loss.backward()
            grads = [params[name].grad for name in names]
            grads, _ = nn.clip_global_norm(grads, cfg.clip_norm)
            optimizer.step(schedule(step),
                           grads={name: g for name, g in zip(names, grads)})
            step += 1
            epoch_losses.append(value)
        history.append(float(np.mean(epoch_losses)))
        if progress is not None:
            progress(epoch, history[-1])
    return params, history


# -- embedding extraction --------------------------------------------------


def extract_embeddings(records: Sequence[CellFeatures], stats: NormStats,
                       params: dict[str, Tensor],
                       config_hash: str | None = None,
                       checkpoint_hash: str | None = None) -> EmbeddingTable:
    """Patch-projection embeddings: W_p @ normalized counts + b_p per cell.

    No positional term and no encoder blocks, so identical feature
    vectors map to identical embeddings regardless of location.
    """
    if not records:
        raise ValueError("no feature records to embed")
    normalized = apply_norm(np.stack([r.counts for r in records]), stats)
    w = params["patch_proj.w"].data
    vectors = normalized.astype(w.dtype) @ w + params["patch_proj.b"].data
    ids = [CellId.from_token(r.token).raw for r in records]
    return EmbeddingTable.from_vectors(ids, vectors.astype(np.float32),
                                       config_hash=config_hash,
                                       checkpoint_hash=checkpoint_hash)


def extract_embeddings_contextual(dataset: RasterDataset,
                                  params: dict[str, Tensor], cfg: MaeConfig,
                                  config_hash: str | None = None,
                                  checkpoint_hash: str | None = None,
                                  batch_size: int = 16) -> EmbeddingTable:
    """Context-aware embeddings: run the full encoder with nothing masked
    and read each present cell's per-patch output.
    """
    grids, presence = dataset_arrays(dataset)
    slots = cfg.num_patches
    all_visible = np.arange(slots)
    ids: list[int] = []
    vectors: list[np.ndarray] = []
    for start in range(0, grids.shape[0], batch_size):
        stop = min(start + batch_size, grids.shape[0])
        idx = np.tile(all_visible, (stop - start, 1))
        latents = encode_visible_batch(grids[start:stop], idx, params, cfg,
                                       train=False).data
        for offset, image_index in enumerate(range(start, stop)):
            image = dataset.images[image_index]
            parent = CellId.from_token(image.parent_token)
            for slot in np.nonzero(presence[image_index])[0]:
                row, col = divmod(int(slot), dataset.grid_size)
                cell = child_at_grid(parent, row, col, dataset.patch_level)
                ids.append(cell.raw)
                vectors.append(latents[offset, slot].astype(np.float32))
    return EmbeddingTable.from_vectors(ids, np.stack(vectors),
                                       config_hash=config_hash,
                                       checkpoint_hash=checkpoint_hash)


def extract_image_embeddings(dataset: RasterDataset,
                             params: dict[str, Tensor], cfg: MaeConfig,
                             batch_size: int = 16) -> EmbeddingTable:
    """Image-level embeddings: mean of all patch latents from an unmasked
    encoder pass, keyed by the parent cell id.
    """
    grids, _ = dataset_arrays(dataset)
    all_visible = np.arange(cfg.num_patches)
    ids = [CellId.from_token(im.parent_token).raw for im in dataset.images]
    vectors: list[np.ndarray] = []
    for start in range(0, grids.shape[0], batch_size):
        stop = min(start + batch_size, grids.shape[0])
        idx = np.tile(all_visible, (stop - start, 1))
        latents = encode_visible_batch(grids[start:stop], idx, params, cfg,
                                       train=False).data
        vectors.extend(latents.mean(axis=1).astype(np.float32))
    return EmbeddingTable.from_vectors(ids, np.stack(vectors))


# -- checkpoint plumbing ---------------------------------------------------


def save_params(path: str | Path, params: dict[str, Tensor],
                cfg: MaeConfig) -> None:
    nn.save_checkpoint(path, {name: p.data for name, p in params.items()})
    Path(str(path) + ".config.json").write_text(cfg.to_json())


def load_params(path: str | Path,
                dtype=np.float32) -> tuple[dict[str, Tensor], MaeConfig]:
    arrays = nn.load_checkpoint(path)
    cfg = MaeConfig.from_json(Path(str(path) + ".config.json").read_text())
    expected = {name: shape for name, shape, _ in param_specs(cfg)}
    if set(arrays) != set(expected):
        missing = set(expected) ^ set(arrays)
        raise ValueError(f"checkpoint does not match config; mismatch: {sorted(missing)[:4]}")
    params = {}
    for name, array in arrays.items():
        if tuple(array.shape) != tuple(expected[name]):
            raise ValueError(f"tensor {name} has shape {array.shape}, "
                             f"expected {expected[name]}")
        params[name] = Tensor(array.astype(dtype), requires_grad=True)
    return params, cfg
