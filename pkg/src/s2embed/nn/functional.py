"""Neural-net operations composed from (or fused onto) the Tensor core.

The fused ops (gelu, softmax, layer_norm, the gather/scatter pair and
embedding_rows) carry hand-derived backward closures; everything else is
a composition of Tensor primitives. Index arguments are plain integer
numpy arrays, never Tensors.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import Tensor, unbroadcast

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis of x."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w + b


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def vjp(g: np.ndarray) -> np.ndarray:
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return g * (cdf + x.data * pdf)

    return Tensor.from_op(data, (x,), (vjp,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along one axis, computed with the max-shift trick."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray) -> np.ndarray:
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return Tensor.from_op(out, (x,), (vjp,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               eps: float = 1e-6) -> Tensor:
    """Standardize the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError("layer_norm: gamma/beta must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_sigma
    out = xhat * gamma.data + beta.data

    def vjp_x(g: np.ndarray) -> np.ndarray:
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        return (gg - m1 - xhat * m2) * inv_sigma

    def vjp_gamma(g: np.ndarray) -> np.ndarray:
        return unbroadcast(g * xhat, gamma.data.shape)

    def vjp_beta(g: np.ndarray) -> np.ndarray:
        return unbroadcast(g, beta.data.shape)

    return Tensor.from_op(out, (x, gamma, beta), (vjp_x, vjp_gamma, vjp_beta))


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            train: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    keep /= 1.0 - rate
    return Tensor.from_op(x.data * keep, (x,), (lambda g: g * keep,))


def multihead_attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor,
                        wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
                        heads: int, dropout_rate: float = 0.0,
                        rng: np.random.Generator | None = None,
                        train: bool = False) -> Tensor:
    """Scaled dot-product attention over sequences.

    Accepts [S, d] or [B, S, d]; the model dim d must divide evenly into
    heads. Dropout, when active, is applied to the attention weights.
    The key projection carries no bias: a shared key offset shifts every
    logit of a query by the same amount and cancels in the softmax, so
    the parameter would be untrainable dead weight.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    batch, seq, dim = x.shape
    if dim % heads != 0:
        raise ValueError(f"model dim {dim} not divisible by {heads} heads")
    head_dim = dim // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, seq, heads, head_dim).transpose(0, 2, 1, 3)

    q = split(linear(x, wq, bq))
    k = split(x @ wk)
    v = split(linear(x, wv, bv))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    if dropout_rate > 0.0 and train:
        if rng is None:
            raise ValueError("dropout during training requires an rng")
        weights = dropout(weights, dropout_rate, rng, train)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, seq, dim)
    out = linear(context, wo, bo)
    return out.reshape(seq, dim) if squeeze else out


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 1: [B, S, D] x [B, V] -> [B, V, D]."""
    idx = np.asarray(idx)
    data = np.take_along_axis(x.data, idx[:, :, None], axis=1)

    def vjp(g: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x.data)
        batch_idx = np.arange(x.shape[0])[:, None]
        np.add.at(out, (batch_idx, idx), g)
        return out

    return Tensor.from_op(data, (x,), (vjp,))


def scatter_rows_with_fill(values: Tensor, idx: np.ndarray, fill: Tensor,
                           length: int) -> Tensor:
    """Place rows at their indices and a learned fill row everywhere else.

    values: [B, V, D]; idx: [B, V] with unique entries per batch row;
    fill: [D]. Returns [B, S, D] with S = length.
    """
    idx = np.asarray(idx)
    batch, visible, dim = values.shape
    if fill.shape != (dim,):
        raise ValueError("fill row must match the value dimension")
    data = np.broadcast_to(fill.data, (batch, length, dim)).copy()
    np.put_along_axis(data, idx[:, :, None], values.data, axis=1)

    def vjp_values(g: np.ndarray) -> np.ndarray:
        return np.take_along_axis(g, idx[:, :, None], axis=1)

    def vjp_fill(g: np.ndarray) -> np.ndarray:
        total = g.sum(axis=(0, 1))
        at_values = np.take_along_axis(g, idx[:, :, None], axis=1).sum(axis=(0, 1))
        return total - at_values

    return Tensor.from_op(data, (values, fill), (vjp_values, vjp_fill))


def concat_cols(parts: "list[Tensor]") -> Tensor:
    """Concatenate along the last axis; gradients split back by width."""
    if not parts:
        raise ValueError("concat_cols needs at least one operand")
    widths = [p.shape[-1] for p in parts]
    offsets = [0]
    for w in widths:
        offsets.append(offsets[-1] + w)
    data = np.concatenate([p.data for p in parts], axis=-1)
    vjps = tuple(
        (lambda g, lo=offsets[i], hi=offsets[i + 1]: g[..., lo:hi].copy())
        for i in range(len(parts)))
    return Tensor.from_op(data, tuple(parts), vjps)


def embedding_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Look up rows of a [N, D] table; idx may have any shape."""
    idx = np.asarray(idx)
    data = table.data[idx]

    def vjp(g: np.ndarray) -> np.ndarray:
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return out

    return Tensor.from_op(data, (table,), (vjp,))
