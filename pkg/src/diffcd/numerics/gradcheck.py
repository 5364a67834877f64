"""Central finite differences, the independent oracle for :func:`backward`."""

from __future__ import annotations

from typing import Callable

import numpy as np

from diffcd.errors import ContractError
from diffcd.numerics.tensor import Tensor, no_grad


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element ``i`` of ``x``."""
    if h <= 0:
        raise ContractError(f"step must be positive, got {h}")
    base = x.data
    flat = base.ravel()
    grad = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            plus = flat.copy()
            plus[i] += h
            minus = flat.copy()
            minus[i] -= h
            fp = f(Tensor(plus.reshape(base.shape))).item()
            fm = f(Tensor(minus.reshape(base.shape))).item()
            grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(base.shape))


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, rel_floor: float = 1e-4) -> float:
    """``max |a - n| / max(|a|, |n|, rel_floor * max|n|)`` elementwise.

    The floor, scaled to the largest gradient entry, keeps entries whose true
    gradient is almost zero from reporting pure finite-difference round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(n).max(initial=0.0)), float(np.abs(a).max(initial=0.0)))
    floor = max(rel_floor * scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max(initial=0.0))
