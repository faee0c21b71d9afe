"""AdamW with decoupled weight decay, cosine decay, and global-norm clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine decay from initial_lr to alpha * initial_lr over total_steps.

    Steps past total_steps clamp to the floor value.
    """

    initial_lr: float
    alpha: float
    total_steps: int

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def __call__(self, step: int) -> float:
        step = min(max(step, 0), self.total_steps)
        cosine = 0.5 * (1.0 + math.cos(math.pi * step / self.total_steps))
        return self.initial_lr * (self.alpha + (1.0 - self.alpha) * cosine)


def clip_global_norm(grads: Iterable[np.ndarray],
                     max_norm: float = 1.0) -> tuple[list[np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    grads = list(grads)
    total = 0.0
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to clipping")
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * np.asarray(scale, dtype=g.dtype) for g in grads]
    return grads, norm


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter mapping.

    The update per parameter w with gradient g:

        m <- beta1 * m + (1 - beta1) * g
        v <- beta2 * v + (1 - beta2) * g^2
        w <- w - lr * (mhat / (sqrt(vhat) + eps) + weight_decay * w)

    with mhat, vhat the bias-corrected moments.
    """

    def __init__(self, params: Mapping[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.001):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float, grads: Mapping[str, np.ndarray] | None = None) -> None:
        """Apply one update using supplied grads or each tensor's .grad."""
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, param in self.params.items():
            g = grads[name] if grads is not None else param.grad
            if g is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            if g.shape != param.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter "
                                 f"shape {param.data.shape} for {name!r}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / correction1
            vhat = v / correction2
            param.data -= lr * (mhat / (np.sqrt(vhat) + self.eps)
                                + self.weight_decay * param.data)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment estimates and step count as a flat named dict."""
        out: dict[str, np.ndarray] = {"t": np.array([float(self.t)])}
        for name in self.params:
            out[f"m.{name}"] = self.m[name].copy()
            out[f"v.{name}"] = self.v[name].copy()
        return out

    def load_state_arrays(self, state: Mapping[str, np.ndarray]) -> None:
        self.t = int(round(float(state["t"][0])))
        for name, param in self.params.items():
            self.m[name] = np.asarray(state[f"m.{name}"],
                                      dtype=param.data.dtype).reshape(param.data.shape)
            self.v[name] = np.asarray(state[f"v.{name}"],
                                      dtype=param.data.dtype).reshape(param.data.shape)
