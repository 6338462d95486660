"""Deterministic float64 kernels: matmul, softmax, layer norm, GELU, AdamW,
cosine schedule, and a seeded RNG.

Everything runs in a fixed accumulation order so repeated runs produce
identical bits regardless of thread count.  ``matmul`` accumulates over the
inner axis strictly left to right and therefore matches a naive triple loop
bit for bit; a numba kernel provides speed when numba is importable, with a
vectorized numpy fallback that uses the exact same accumulation order.

GELU uses the tanh approximation throughout:

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

try:
    import numba

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAS_NUMBA = False


Matrix = np.ndarray  # 2-D float64, row-major

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# -----------------------------------------------------------------------------
# Seeded RNG
# -----------------------------------------------------------------------------

_U64_MASK = (1 << 64) - 1
_SM_GOLDEN = 0x9E3779B97F4A7C15
_SM_MIX1 = 0xBF58476D1CE4E5B9
_SM_MIX2 = 0x94D049BB133111EB


class Rng:
    """SplitMix64 stream with Box-Muller normal deviates.

    The k-th raw draw (k = 1, 2, ...) is ``mix64(seed + k * 0x9E3779B97F4A7C15)``
    where mix64 is the standard SplitMix64 finalizer, so bulk sampling
    vectorizes without changing the stream.  Uniforms take the top 53 bits:
    ``u = (raw >> 11) * 2**-53``.  Each normal consumes exactly two raw draws
    (u1, u2), with u1 shifted into (0, 1]:

        z = sqrt(-2 ln u1) * cos(2 pi u2)

    No spare deviate is cached, so scalar and bulk sampling yield identical
    streams.  Identical seeds give identical streams on every platform that
    rounds libm consistently; the integer stream itself is exact everywhere.
    """

    def __init__(self, seed: int):
        self.seed = seed & _U64_MASK
        self._count = 0  # raw draws consumed so far

    def _raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 draws, vectorized."""
        ks = np.arange(self._count + 1, self._count + 1 + n, dtype=np.uint64)
        self._count += n
        z = np.uint64(self.seed) + ks * np.uint64(_SM_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_SM_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_SM_MIX2)
        return z ^ (z >> np.uint64(31))

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def uniform(self) -> float:
        """One uniform in [0, 1)."""
        return float(self.uniforms(1)[0])

    def uniforms(self, n: int) -> np.ndarray:
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """n i.i.d. normal draws; std == 0 yields exactly ``mean`` everywhere."""
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        raw = self._raw(2 * n)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return mean + std * z

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        return float(self.normals(1, mean, std)[0])

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n), bias-free via rejection."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        limit = _U64_MASK + 1 - ((_U64_MASK + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, stream: int) -> "Rng":
        """Independent child stream, deterministic in (seed, stream)."""
        mixed = (self.seed + (stream + 1) * _SM_GOLDEN) & _U64_MASK
        z = ((mixed ^ (mixed >> 30)) * _SM_MIX1) & _U64_MASK
        z = ((z ^ (z >> 27)) * _SM_MIX2) & _U64_MASK
        return Rng(z ^ (z >> 31))


def sample_normal(rng: Rng, mean: float, std: float, n: int) -> np.ndarray:
    """n normal draws from rng; deterministic per seed."""
    return rng.normals(n, mean, std)


# -----------------------------------------------------------------------------
# Matmul with a fixed accumulation order
# -----------------------------------------------------------------------------

if _HAS_NUMBA:

    @numba.njit(cache=True)
    def _mm_row(a, b, acc, i):
        # One output row into acc: each entry accumulates over k strictly in
        # increasing order (the 4-way unroll keeps the same IEEE op sequence
        # per entry), bit-identical to the naive i,j,k triple loop.  A
        # k-ordered sum starting from +0.0 can never produce -0.0, so the
        # final plain store preserves bits.
        kk = a.shape[1]
        m = b.shape[1]
        kk4 = (kk // 4) * 4
        for j in range(m):
            acc[j] = 0.0
        for k0 in range(0, kk4, 4):
            a0 = a[i, k0]
            a1 = a[i, k0 + 1]
            a2 = a[i, k0 + 2]
            a3 = a[i, k0 + 3]
            for j in range(m):
                acc[j] = (((acc[j] + a0 * b[k0, j]) + a1 * b[k0 + 1, j])
                          + a2 * b[k0 + 2, j]) + a3 * b[k0 + 3, j]
        for k in range(kk4, kk):
            aik = a[i, k]
            for j in range(m):
                acc[j] += aik * b[k, j]

    @numba.njit(cache=True)
    def _mm_kernel(a, b, out):
        n = a.shape[0]
        m = b.shape[1]
        acc = np.empty(m)
        for i in range(n):
            _mm_row(a, b, acc, i)
            for j in range(m):
                out[i, j] = acc[j]

    @numba.njit(cache=True)
    def _mm_kernel3(a, b, out):
        # Stacked variant: per-slice identical to _mm_kernel.
        s, n, _ = a.shape
        m = b.shape[2]
        acc = np.empty(m)
        for si in range(s):
            for i in range(n):
                _mm_row(a[si], b[si], acc, i)
                for j in range(m):
                    out[si, i, j] = acc[j]


def _mm_fallback(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    # Rank-1 updates in increasing k: same per-entry accumulation order.
    tmp = np.empty_like(out)
    for k in range(a.shape[1]):
        np.multiply(a[:, k : k + 1], b[k : k + 1, :], out=tmp)
        out += tmp


def _mm_fallback3(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    tmp = np.empty_like(out)
    for k in range(a.shape[2]):
        np.multiply(a[:, :, k : k + 1], b[:, k : k + 1, :], out=tmp)
        out += tmp


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """a @ b with left-to-right accumulation over the inner axis.

    Accepts 2-D @ 2-D, stacked 3-D @ 3-D (equal leading axis), and 3-D @ 2-D
    (shared right operand).  Bit-reproducible across runs and thread counts;
    a zero inner dimension yields an all-zero result (empty-sum convention).
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim == 3 and b.ndim == 2:
        folded = matmul(a.reshape(-1, a.shape[2]), b)
        return folded.reshape(a.shape[0], a.shape[1], b.shape[1])
    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        out = np.zeros((a.shape[0], a.shape[1], b.shape[2]))
        if _HAS_NUMBA:
            _mm_kernel3(a, b, out)
        else:
            _mm_fallback3(a, b, out)
        return out
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D or 3-D arrays, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    if _HAS_NUMBA:
        _mm_kernel(a, b, out)
    else:
        _mm_fallback(a, b, out)
    return out


# -----------------------------------------------------------------------------
# Softmax
# -----------------------------------------------------------------------------


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax with per-row max subtraction for stability."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(probs: Matrix, dprobs: Matrix) -> Matrix:
    """Gradient wrt softmax input given probs = softmax_rows(input)."""
    dot = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - dot)


# -----------------------------------------------------------------------------
# Layer norm
# -----------------------------------------------------------------------------


def layer_norm(x: Matrix, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> Matrix:
    """Per-row normalization to mean 0, variance 1, then affine gamma/beta."""
    x = np.asarray(x, dtype=np.float64)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(
            f"gamma/beta must have length {x.shape[-1]}, got {gamma.shape}/{beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return gamma * xhat + beta


def layer_norm_cached(
    x: Matrix, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> tuple[Matrix, Matrix, Matrix]:
    """layer_norm that also returns (xhat, inv_std) for a cached backward."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return gamma * xhat + beta, xhat, inv


def layer_norm_backward_cached(
    xhat: Matrix, inv: Matrix, gamma: np.ndarray, dout: Matrix
) -> tuple[Matrix, np.ndarray, np.ndarray]:
    """(dx, dgamma, dbeta) from the statistics layer_norm_cached produced."""
    d = xhat.shape[-1]
    dgamma = (dout * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dout.reshape(-1, d).sum(axis=0)
    dxhat = dout * gamma
    # dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) per row
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def layer_norm_backward(
    x: Matrix, gamma: np.ndarray, dout: Matrix, eps: float = 1e-5
) -> tuple[Matrix, np.ndarray, np.ndarray]:
    """(dx, dgamma, dbeta) for layer_norm; recomputes row statistics."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return layer_norm_backward_cached(xc * inv, inv, gamma, dout)


# -----------------------------------------------------------------------------
# GELU (tanh approximation; formula in the module docstring)
# -----------------------------------------------------------------------------


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * (x2 * x))))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x2 * x)))
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def gelu_with_grad(x) -> tuple[np.ndarray, np.ndarray]:
    """(gelu(x), gelu'(x)), sharing one tanh evaluation."""
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x2 * x)))
    half_1pt = 0.5 * (1.0 + t)
    y = x * half_1pt
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    dy = half_1pt + x * (0.5 - 0.5 * (t * t)) * du
    return y, dy


# -----------------------------------------------------------------------------
# AdamW
# -----------------------------------------------------------------------------


@dataclass
class AdamWState:
    """First/second moment accumulators per parameter tensor plus step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam step, updating params in place.

    Decay is applied as p <- p - lr*wd*p before the bias-corrected adaptive
    update.  Iteration order over tensors is the params dict order.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        p -= lr * weight_decay * p
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Cosine decay from base_lr at step 0 to min_lr at step == total_steps."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} out of range [0, {total_steps}]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))
