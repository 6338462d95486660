"""Fit mixture kernels to a dense target mask by gradient descent.

The loss is mean squared error in unfolded mask space (the observable), not
parameter space: kernel permutation and the sigma sign make parameters
non-identifiable, so only mask-space RMSE is ever reported or asserted.
AdamW with cosine-decayed lr drives (alpha, sigma); the nonconvex sigma
landscape is handled by multi-start restarts (best final RMSE wins, ties by
restart index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mask import (
    DEFAULT_EPS,
    GaussianKernel,
    init_kernels,
    mask_param_grads_arrays,
    unfold_mask_arrays,
)
from .numerics import AdamWState, Rng, adamw_step, cosine_lr


@dataclass
class FitResult:
    kernels: list[GaussianKernel]
    loss_trace: np.ndarray  # MSE after each optimizer step
    final_rmse: float
    restart: int = 0


def _grid_side(target: np.ndarray) -> int:
    if target.ndim != 2 or target.shape[0] != target.shape[1]:
        raise ValueError(f"target must be square, got {target.shape}")
    g = math.isqrt(target.shape[0])
    if g * g != target.shape[0]:
        raise ValueError(
            f"target side {target.shape[0]} is not a perfect square; "
            "mixture masks need a g x g patch grid"
        )
    return g


def mask_rmse(kernels, target: np.ndarray, epsilon: float = DEFAULT_EPS) -> float:
    """Root-mean-square error between the kernels' unfolded mask and target."""
    g = _grid_side(np.asarray(target, dtype=np.float64))
    m = unfold_mask_arrays(
        np.array([k.alpha for k in kernels]), np.array([k.sigma for k in kernels]),
        g, epsilon,
    )
    return float(np.sqrt(np.mean((m - target) ** 2)))


def _fit_once(
    target: np.ndarray, k: int, steps: int, lr: float, rng: Rng, epsilon: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    g = _grid_side(target)
    n2 = float(target.size)
    kernels = init_kernels(rng, k)
    params = {
        "alpha": np.array([kr.alpha for kr in kernels]),
        "sigma": np.array([kr.sigma for kr in kernels]),
    }
    state = AdamWState.for_params(params)
    trace = np.empty(steps)
    m = unfold_mask_arrays(params["alpha"], params["sigma"], g, epsilon)
    for step in range(steps):
        upstream = 2.0 * (m - target) / n2  # d(MSE)/dM
        da, ds = mask_param_grads_arrays(
            params["alpha"], params["sigma"], g, epsilon, upstream
        )
        adamw_step(params, {"alpha": da, "sigma": ds}, state,
                   lr=cosine_lr(step, steps, lr))
        m = unfold_mask_arrays(params["alpha"], params["sigma"], g, epsilon)
        trace[step] = np.mean((m - target) ** 2)
    return params["alpha"], params["sigma"], trace


def fit_gmm_to_elm(
    target: np.ndarray,
    k: int,
    steps: int,
    lr: float = 0.05,
    rng: Rng | None = None,
    restarts: int = 3,
    epsilon: float = DEFAULT_EPS,
) -> FitResult:
    """Fit k kernels to a square target mask; returns the best restart.

    steps == 0 reports the RMSE of the (first restart's) initial kernels and
    an empty loss trace.
    """
    target = np.asarray(target, dtype=np.float64)
    _grid_side(target)
    if k < 1:
        raise ValueError(f"kernel count must be >= 1, got {k}")
    if steps < 0 or restarts < 1:
        raise ValueError("steps must be >= 0 and restarts >= 1")
    rng = rng if rng is not None else Rng(0)

    best: FitResult | None = None
    for r in range(restarts):
        child = rng.spawn(r)
        if steps == 0:
            kernels = init_kernels(child, k)
            result = FitResult(
                kernels=kernels, loss_trace=np.empty(0),
                final_rmse=mask_rmse(kernels, target, epsilon), restart=r,
            )
        else:
            alpha, sigma, trace = _fit_once(target, k, steps, lr, child, epsilon)
            kernels = [GaussianKernel(a, s) for a, s in zip(alpha.tolist(), sigma.tolist())]
            result = FitResult(
                kernels=kernels, loss_trace=trace,
                final_rmse=mask_rmse(kernels, target, epsilon), restart=r,
            )
        if best is None or result.final_rmse < best.final_rmse:
            best = result
    return best


def extroversion_score(mask_values: np.ndarray) -> float:
    """mean(diagonal) - mean(off-diagonal); negative means self-suppression."""
    m = np.asarray(mask_values, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"mask must be square, got {m.shape}")
    n = m.shape[0]
    diag_mean = float(np.trace(m) / n)
    if n == 1:
        return diag_mean
    off_mean = float((m.sum() - np.trace(m)) / (n * n - n))
    return diag_mean - off_mean


def kernel_count_sweep(
    target: np.ndarray,
    ks: list[int],
    steps: int,
    lr: float = 0.05,
    rng: Rng | None = None,
    restarts: int = 3,
    epsilon: float = DEFAULT_EPS,
) -> list[tuple[int, float]]:
    """Final mask-space RMSE as a function of kernel count (reporting only)."""
    rng = rng if rng is not None else Rng(0)
    out = []
    for k in ks:
        res = fit_gmm_to_elm(target, k, steps, lr, rng.spawn(1000 + k),
                             restarts=restarts, epsilon=epsilon)
        out.append((k, res.final_rmse))
    return out
