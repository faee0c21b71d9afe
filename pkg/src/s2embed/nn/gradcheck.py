"""Central finite-difference verification of autodiff gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-5, denom_floor: float = 1e-8) -> float:
    """Max elementwise relative error between autodiff and finite differences.

    `f` must rebuild its computation from the current contents of `params`
    on every call and return a scalar Tensor; it must be deterministic
    (fix any randomness internally). Use 64-bit parameters.
    """
    for p in params:
        p.grad = None
    out = f()
    value = float(out.data)
    if not np.isfinite(value):
        raise FloatingPointError("function value is not finite")
    out.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(np.array(p.grad, copy=True))

    worst = 0.0
    for p, ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        ad_flat = ad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            f_plus = float(f().data)
            flat[i] = saved - h
            f_minus = float(f().data)
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("non-finite evaluation during check")
            fd = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(ad_flat[i]), abs(fd), denom_floor)
            worst = max(worst, abs(ad_flat[i] - fd) / denom)
    return worst
