"""Shared test oracles, independent of the library code paths they check."""

from __future__ import annotations

import numpy as np


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple loop, accumulating over k in increasing order."""
    n, kk = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(kk):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def rel_err(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    """Relative error with an absolute floor so FD noise on near-zero
    gradients cannot dominate."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def central_diff(f, x: np.ndarray, index: int, h: float = 1e-4) -> float:
    """Central finite difference of scalar f wrt one flattened entry of x."""
    flat = x.reshape(-1)
    orig = flat[index]
    flat[index] = orig + h
    fp = f()
    flat[index] = orig - h
    fm = f()
    flat[index] = orig
    return (fp - fm) / (2.0 * h)


def max_grad_rel_err(f, tensor: np.ndarray, analytic: np.ndarray,
                     h: float = 1e-4, stride: int = 1, floor: float = 1e-3) -> float:
    """Worst rel_err between analytic grads and central differences over the
    tensor's entries (every stride-th entry)."""
    flat_g = analytic.reshape(-1)
    worst = 0.0
    for i in range(0, tensor.size, stride):
        num = central_diff(f, tensor, i, h)
        worst = max(worst, rel_err(flat_g[i], num))
    return worst
