"""Gaussian mixture attention masks and the dense learnable-mask baseline.

A mixture mask is parameterized by K (alpha, sigma) kernel pairs.  The value
at grid offset (x, y) between two patches is

    sum_k alpha_k * exp(-(x^2 + y^2) / (2 * sigma_k^2 + eps))

collected once into a (2g-1) x (2g-1) weight matrix and then unfolded into an
N x N mask (N = g^2 patches) through the offset rule

    x = |i mod g - j mod g|,   y = |i div g - j div g|

so all attention entries sharing a grid offset share one mask value.  sigma
enters only through sigma^2; its sign never matters.  eps > 0 guards the
sigma == 0 case.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fileio import FormatError, atomic_write_text
from .numerics import Rng

DEFAULT_EPS = 1e-6

# Initialization distributions for the learnable kernel parameters:
# alpha ~ N(0, 2^2), sigma ~ N(10, 10^2).
INIT_MEAN_ALPHA = 0.0
INIT_STD_ALPHA = 2.0
INIT_MEAN_SIGMA = 10.0
INIT_STD_SIGMA = 10.0


@dataclass(frozen=True)
class GaussianKernel:
    """One mixture component: weight alpha, width sigma."""

    alpha: float
    sigma: float


@dataclass(frozen=True)
class OffsetPair:
    """Absolute grid offset between two patch indices."""

    dx: int
    dy: int


@dataclass
class ElementwiseMask:
    """Dense N x N learnable mask (the heavyweight baseline)."""

    values: np.ndarray

    @property
    def side(self) -> int:
        return self.values.shape[0]


def elm_new(n: int, init_value: float = 1.0) -> ElementwiseMask:
    """All-``init_value`` N x N mask; the default 1.0 is a multiplicative no-op."""
    if n < 1:
        raise ValueError(f"mask side must be >= 1, got {n}")
    return ElementwiseMask(values=np.full((n, n), float(init_value)))


def init_kernels(
    rng: Rng,
    k: int,
    mean_alpha: float = INIT_MEAN_ALPHA,
    std_alpha: float = INIT_STD_ALPHA,
    mean_sigma: float = INIT_MEAN_SIGMA,
    std_sigma: float = INIT_STD_SIGMA,
) -> list[GaussianKernel]:
    """K kernels with alpha ~ N(0, 4) and sigma ~ N(10, 100) by default.

    Draw order is (alpha, sigma) per kernel, in kernel order.
    """
    if k < 0:
        raise ValueError(f"kernel count must be >= 0, got {k}")
    kernels = []
    for _ in range(k):
        alpha = rng.normal(mean_alpha, std_alpha)
        sigma = rng.normal(mean_sigma, std_sigma)
        kernels.append(GaussianKernel(alpha=alpha, sigma=sigma))
    return kernels


def _kernel_arrays(kernels) -> tuple[np.ndarray, np.ndarray]:
    alpha = np.array([k.alpha for k in kernels], dtype=np.float64)
    sigma = np.array([k.sigma for k in kernels], dtype=np.float64)
    return alpha, sigma


def weight_matrix(kernels, g: int, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    """(2g-1)-sided table of mask values indexed by grid offset.

    Entry at offset (x, y) from the center index (g-1, g-1) is the mixture
    value; rows index the vertical offset.
    """
    alpha, sigma = _kernel_arrays(kernels)
    return _weight_matrix_arrays(alpha, sigma, g, epsilon)


def _weight_matrix_arrays(
    alpha: np.ndarray, sigma: np.ndarray, g: int, epsilon: float
) -> np.ndarray:
    if g < 1:
        raise ValueError(f"grid side must be >= 1, got {g}")
    coords = np.arange(2 * g - 1) - (g - 1)
    d2 = coords[:, None] ** 2 + coords[None, :] ** 2
    w = np.zeros((2 * g - 1, 2 * g - 1))
    # Sequential accumulation in kernel order keeps results bit-reproducible.
    for a, s in zip(alpha, sigma):
        w += a * np.exp(-d2 / (2.0 * s * s + epsilon))
    return w


def offset_of(i: int, j: int, g: int) -> OffsetPair:
    """Absolute grid offset between patch indices i and j on a g x g grid."""
    n = g * g
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"patch indices ({i}, {j}) out of range for g={g}")
    return OffsetPair(dx=abs(i % g - j % g), dy=abs(i // g - j // g))


@lru_cache(maxsize=32)
def _offset_index_tables(g: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(xi, yi, flat offset ids, per-id squared distance) for a g x g grid."""
    idx = np.arange(g * g)
    col = idx % g
    row = idx // g
    xi = np.abs(col[:, None] - col[None, :])
    yi = np.abs(row[:, None] - row[None, :])
    ids = yi * g + xi
    od = np.arange(g)
    # d2_by_id[dy * g + dx] == dx^2 + dy^2
    d2_by_id = (od[:, None] ** 2 + od[None, :] ** 2).reshape(-1).astype(np.float64)
    return xi, yi, ids.reshape(-1), d2_by_id


def unfold_mask(kernels, g: int, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    """N x N mask (N = g^2): entry (i, j) is the weight-matrix value at
    offset_of(i, j, g)."""
    alpha, sigma = _kernel_arrays(kernels)
    return unfold_mask_arrays(alpha, sigma, g, epsilon)


def unfold_mask_arrays(
    alpha: np.ndarray, sigma: np.ndarray, g: int, epsilon: float = DEFAULT_EPS
) -> np.ndarray:
    w = _weight_matrix_arrays(alpha, sigma, g, epsilon)
    xi, yi, _, _ = _offset_index_tables(g)
    return w[(g - 1) + yi, (g - 1) + xi]


def mask_param_grads(
    kernels, g: int, epsilon: float, upstream: np.ndarray
) -> list[tuple[float, float]]:
    """Per-kernel (dalpha, dsigma) for an N x N upstream gradient.

    With u = 2*sigma^2 + eps and d2 = x^2 + y^2 at each entry's offset:
        dM/dalpha = exp(-d2/u)
        dM/dsigma = alpha * exp(-d2/u) * d2 * 4*sigma / u^2
    Entries sharing an offset share parameters, so upstream is summed per
    offset before the chain rule.
    """
    alpha, sigma = _kernel_arrays(kernels)
    da, ds = mask_param_grads_arrays(alpha, sigma, g, epsilon, upstream)
    return list(zip(da.tolist(), ds.tolist()))


def mask_param_grads_arrays(
    alpha: np.ndarray, sigma: np.ndarray, g: int, epsilon: float, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    n = g * g
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (n, n):
        raise ValueError(f"upstream must be {n} x {n}, got {upstream.shape}")
    _, _, ids, d2 = _offset_index_tables(g)
    up = np.bincount(ids, weights=upstream.reshape(-1), minlength=g * g)
    u = 2.0 * sigma * sigma + epsilon
    e = np.exp(-d2[None, :] / u[:, None])  # (K, g^2)
    dalpha = (e * up[None, :]).sum(axis=1)
    dsigma = alpha * (4.0 * sigma / (u * u)) * (e * d2[None, :] * up[None, :]).sum(axis=1)
    return dalpha, dsigma


def gmm_param_count(k: int, h: int, layers: int) -> int:
    """Learnable scalars for mixture masks: 2 per kernel per mask slot."""
    if min(k, h, layers) < 0:
        raise ValueError("counts must be non-negative")
    return 2 * k * h * layers


def elm_param_count(n: int, layers: int) -> int:
    """Learnable scalars for dense masks: one full N x N table per layer."""
    if min(n, layers) < 0:
        raise ValueError("counts must be non-negative")
    return layers * n * n


@dataclass
class GmmMaskBank:
    """Per-layer, per-head kernel parameters for a whole model.

    ``alpha`` and ``sigma`` have shape (layers, slots, K) where slots is the
    head count, or 1 when one kernel set is shared by every head of a layer.
    """

    layers: int
    slots: int
    kernels_per_mask: int
    grid: int
    alpha: np.ndarray
    sigma: np.ndarray
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        expected = (self.layers, self.slots, self.kernels_per_mask)
        if self.alpha.shape != expected or self.sigma.shape != expected:
            raise ValueError(
                f"kernel arrays must have shape {expected}, got "
                f"{self.alpha.shape}/{self.sigma.shape}"
            )
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.grid < 1:
            raise ValueError(f"grid side must be >= 1, got {self.grid}")

    @classmethod
    def init(
        cls,
        rng: Rng,
        layers: int,
        heads: int,
        kernels_per_mask: int,
        grid: int,
        shared_heads: bool = False,
        epsilon: float = DEFAULT_EPS,
        mean_alpha: float = INIT_MEAN_ALPHA,
        std_alpha: float = INIT_STD_ALPHA,
        mean_sigma: float = INIT_MEAN_SIGMA,
        std_sigma: float = INIT_STD_SIGMA,
    ) -> "GmmMaskBank":
        slots = 1 if shared_heads else heads
        alpha = np.empty((layers, slots, kernels_per_mask))
        sigma = np.empty((layers, slots, kernels_per_mask))
        for l in range(layers):
            for s in range(slots):
                kernels = init_kernels(rng, kernels_per_mask, mean_alpha,
                                       std_alpha, mean_sigma, std_sigma)
                for k, kern in enumerate(kernels):
                    alpha[l, s, k] = kern.alpha
                    sigma[l, s, k] = kern.sigma
        return cls(
            layers=layers,
            slots=slots,
            kernels_per_mask=kernels_per_mask,
            grid=grid,
            alpha=alpha,
            sigma=sigma,
            epsilon=epsilon,
        )

    def mask_for(self, layer: int, head: int) -> np.ndarray:
        s = head if self.slots > 1 else 0
        return unfold_mask_arrays(
            self.alpha[layer, s], self.sigma[layer, s], self.grid, self.epsilon
        )

    def param_count(self) -> int:
        return gmm_param_count(self.kernels_per_mask, self.slots, self.layers)


# -----------------------------------------------------------------------------
# Mask CSV: headerless, row-major, one row per line, >= 9 significant digits
# -----------------------------------------------------------------------------


def save_mask_csv(path: str, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"mask CSV expects a 2-D array, got {matrix.ndim}-D")
    lines = [",".join(f"{v:.17g}" for v in row) for row in matrix]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_mask_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: unparseable cell ({exc})") from exc
    if not rows:
        raise FormatError(f"{path}: empty mask CSV")
    width = len(rows[0])
    for lineno, row in enumerate(rows, start=1):
        if len(row) != width:
            raise FormatError(
                f"{path}: ragged CSV (row {lineno} has {len(row)} cells, expected {width})"
            )
    return np.array(rows, dtype=np.float64)
