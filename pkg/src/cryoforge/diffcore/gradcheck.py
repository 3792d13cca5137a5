"""Central finite differences, the independent check on every taped op."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], leaf: Tensor, eps: float = 1e-5,
                   indices=None) -> np.ndarray:
    """d fn() / d leaf by central differences, optionally at a subset of flat indices."""
    flat = leaf.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn().data)
        flat[i] = orig - eps
        lo = float(fn().data)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(leaf.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over entries, on a scale set by the largest entry."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)
