"""Masked multi-head self-attention with a hand-written backward pass.

Per head: scores A = Q K^T / sqrt(d_k), elementwise mask B = A * M, softmax,
then the value product; heads are concatenated and sent through the output
projection.  The mask source is one of

  * a ``GmmSlot`` (mixture kernels, one set per head or one shared set),
  * an ``ElementwiseMask`` (one dense N x N table shared by all heads),
  * ``None`` (plain attention).

The mask depends only on grid geometry, never on content, so one mask per
head serves every image in a batch.  By default the mask multiplies the
scaled scores before the softmax; ``mask_after_softmax`` instead multiplies
the softmax output, kept purely as an experiment switch (the two are not
equivalent and are never asserted equal).

The core runs on stacked inputs (B, N, D); the single-image entry points
wrap a batch of one.  Backward returns gradients for the input, every
projection weight and bias, and the mask parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mask import (
    DEFAULT_EPS,
    ElementwiseMask,
    mask_param_grads_arrays,
    unfold_mask_arrays,
)
from .numerics import Rng, matmul, softmax_rows, softmax_rows_backward


@dataclass
class GmmSlot:
    """Mixture-kernel parameters feeding one attention block.

    alpha/sigma have shape (slots, K); slots equals the head count, or 1 when
    all heads share one kernel set.
    """

    alpha: np.ndarray
    sigma: np.ndarray
    grid: int
    epsilon: float = DEFAULT_EPS


@dataclass
class AttentionWeights:
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    heads: int
    mask: GmmSlot | ElementwiseMask | None = None
    mask_after_softmax: bool = False

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


@dataclass
class AttentionTrace:
    """Activations cached by the forward pass.

    Head-resolved arrays are stacked (B, H, N, ...); ``o`` is the matrix that
    multiplied V (the softmax output, or its masked variant when the mask
    sits after the softmax).
    """

    w: AttentionWeights
    x: np.ndarray  # (B, N, D)
    q: np.ndarray  # (B, H, N, dk)
    k: np.ndarray
    v: np.ndarray
    a: np.ndarray  # (B, H, N, N) scaled scores, pre-mask
    p: np.ndarray  # (B, H, N, N) softmax rows
    o: np.ndarray  # (B, H, N, N)
    masks: np.ndarray | None  # (H, N, N), shared across the batch
    y: np.ndarray  # (B, N, D) concatenated head outputs
    batched: bool = True


@dataclass
class AttentionGrads:
    x: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    mask_alpha: np.ndarray | None = None  # (slots, K) for a GmmSlot source
    mask_sigma: np.ndarray | None = None
    mask_elm: np.ndarray | None = None  # (N, N) for an ElementwiseMask source


def init_attention_weights(
    rng: Rng,
    dim: int,
    heads: int,
    mask: GmmSlot | ElementwiseMask | None = None,
    mask_after_softmax: bool = False,
    w_std: float = 0.02,
) -> AttentionWeights:
    """Random projection weights (std ``w_std``), zero biases."""
    if dim % heads != 0:
        raise ValueError(f"dim {dim} not divisible by {heads} heads")

    def w():
        return rng.normals(dim * dim, 0.0, w_std).reshape(dim, dim)

    return AttentionWeights(
        w_q=w(), b_q=np.zeros(dim),
        w_k=w(), b_k=np.zeros(dim),
        w_v=w(), b_v=np.zeros(dim),
        w_o=w(), b_o=np.zeros(dim),
        heads=heads, mask=mask, mask_after_softmax=mask_after_softmax,
    )


def qkv_project(x: np.ndarray, w: AttentionWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Q, K, V) = (x W_q + b_q, x W_k + b_k, x W_v + b_v), full width."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.dim:
        raise ValueError(f"input must be ... x {w.dim}, got {x.shape}")
    return (
        matmul(x, w.w_q) + w.b_q,
        matmul(x, w.w_k) + w.b_k,
        matmul(x, w.w_v) + w.b_v,
    )


def split_heads(m: np.ndarray, heads: int) -> np.ndarray:
    """(..., N, D) -> (..., heads, N, D/heads): head h takes columns
    [h*dk, (h+1)*dk)."""
    *lead, n, d = m.shape
    out = m.reshape(*lead, n, heads, d // heads)
    return np.ascontiguousarray(np.moveaxis(out, -2, -3))


def merge_heads(m: np.ndarray) -> np.ndarray:
    """(..., heads, N, dk) -> (..., N, heads*dk); inverse of split_heads."""
    *lead, h, n, dk = m.shape
    return np.ascontiguousarray(np.moveaxis(m, -3, -2)).reshape(*lead, n, h * dk)


def scores(q: np.ndarray, k: np.ndarray, d_k: int) -> np.ndarray:
    """Scaled dot products Q K^T / sqrt(d_k); stacked inputs allowed."""
    kt = k.T if k.ndim == 2 else np.ascontiguousarray(np.swapaxes(k, -1, -2))
    return matmul(q, kt) / math.sqrt(d_k)


def apply_mask(a: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Elementwise product of score matrix and mask."""
    if a.shape[-2:] != m.shape[-2:]:
        raise ValueError(f"mask shape {m.shape} != scores shape {a.shape}")
    return a * m


def materialize_masks(
    source: GmmSlot | ElementwiseMask | None, heads: int, n: int
) -> np.ndarray | None:
    """(heads, N, N) mask stack for one block, or None for plain attention."""
    if source is None:
        return None
    if isinstance(source, ElementwiseMask):
        if source.values.shape != (n, n):
            raise ValueError(f"elementwise mask is {source.values.shape}, need ({n}, {n})")
        return np.broadcast_to(source.values, (heads, n, n))
    if source.grid * source.grid != n:
        raise ValueError(
            f"mask grid {source.grid}^2 != sequence length {n}; "
            "mixture masks need a square patch grid"
        )
    slots = source.alpha.shape[0]
    per_slot = np.stack([
        unfold_mask_arrays(source.alpha[s], source.sigma[s], source.grid, source.epsilon)
        for s in range(slots)
    ])
    if slots == 1:
        return np.broadcast_to(per_slot[0], (heads, n, n))
    return per_slot


def attention_forward(x: np.ndarray, w: AttentionWeights) -> tuple[np.ndarray, AttentionTrace]:
    """One masked attention block on (N, D) tokens; returns (output, trace)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"attention_forward expects (N, D) tokens, got {x.shape}")
    out, trace = attention_forward_batched(x[None], w)
    trace.batched = False
    return out[0], trace


def attention_forward_batched(
    x: np.ndarray, w: AttentionWeights
) -> tuple[np.ndarray, AttentionTrace]:
    """Batched forward on (B, N, D) token stacks sharing one weight set."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != w.dim:
        raise ValueError(f"expected (B, N, {w.dim}) input, got {x.shape}")
    b, n, d = x.shape
    h = w.heads
    if d % h != 0:
        raise ValueError(f"dim {d} not divisible by {h} heads")
    dk = d // h

    q, k, v = qkv_project(x, w)
    qh = split_heads(q, h)  # (B, H, N, dk)
    kh = split_heads(k, h)
    vh = split_heads(v, h)
    masks = materialize_masks(w.mask, h, n)

    flat = lambda t: t.reshape(b * h, *t.shape[2:])
    a = scores(flat(qh), flat(kh), dk).reshape(b, h, n, n)
    if masks is not None and not w.mask_after_softmax:
        p = softmax_rows(a * masks)
        o = p
    elif masks is not None:
        p = softmax_rows(a)
        o = p * masks
    else:
        p = softmax_rows(a)
        o = p
    heads_out = matmul(flat(o), flat(vh)).reshape(b, h, n, dk)
    y = merge_heads(heads_out)
    out = matmul(y, w.w_o) + w.b_o
    trace = AttentionTrace(w=w, x=x, q=qh, k=kh, v=vh, a=a, p=p, o=o, masks=masks, y=y)
    return out, trace


def attention_backward(trace: AttentionTrace, upstream: np.ndarray) -> AttentionGrads:
    """Gradients of a scalar loss wrt inputs, weights, and mask parameters.

    ``upstream`` is dLoss/dOutput, shaped exactly like the forward output the
    trace came from.
    """
    w = trace.w
    b, n, d = trace.x.shape
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = (n, d) if not trace.batched else (b, n, d)
    if upstream.shape != expected:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match trace output {expected}"
        )
    if not trace.batched:
        upstream = upstream[None]
    h = w.heads
    dk = d // h
    inv_sqrt = 1.0 / math.sqrt(dk)
    flat = lambda t: t.reshape(b * h, *t.shape[2:])
    tr = lambda t: np.ascontiguousarray(np.swapaxes(t, -1, -2))

    x2 = trace.x.reshape(b * n, d)
    up2 = upstream.reshape(b * n, d)
    dw_o = matmul(trace.y.reshape(b * n, d).T, up2)
    db_o = up2.sum(axis=0)
    dy = matmul(upstream, w.w_o.T)
    dyh = split_heads(dy, h)  # (B, H, N, dk)

    do = matmul(flat(dyh), tr(flat(trace.v))).reshape(b, h, n, n)
    dv = matmul(tr(flat(trace.o)), flat(dyh)).reshape(b, h, n, dk)
    if trace.masks is None:
        da = softmax_rows_backward(trace.p, do)
        dmask = None
    elif w.mask_after_softmax:
        dmask = (do * trace.p).sum(axis=0)  # (H, N, N)
        da = softmax_rows_backward(trace.p, do * trace.masks)
    else:
        db = softmax_rows_backward(trace.p, do)
        dmask = (db * trace.a).sum(axis=0)
        da = db * trace.masks
    dq = matmul(flat(da), flat(trace.k)).reshape(b, h, n, dk) * inv_sqrt
    dk_ = matmul(tr(flat(da)), flat(trace.q)).reshape(b, h, n, dk) * inv_sqrt

    dq2 = merge_heads(dq).reshape(b * n, d)
    dk2 = merge_heads(dk_).reshape(b * n, d)
    dv2 = merge_heads(dv).reshape(b * n, d)

    dx = (matmul(dq2, w.w_q.T) + matmul(dk2, w.w_k.T) + matmul(dv2, w.w_v.T)).reshape(b, n, d)
    grads = AttentionGrads(
        x=dx if trace.batched else dx[0],
        w_q=matmul(x2.T, dq2), b_q=dq2.sum(axis=0),
        w_k=matmul(x2.T, dk2), b_k=dk2.sum(axis=0),
        w_v=matmul(x2.T, dv2), b_v=dv2.sum(axis=0),
        w_o=dw_o, b_o=db_o,
    )

    if dmask is not None and isinstance(w.mask, ElementwiseMask):
        grads.mask_elm = dmask.sum(axis=0)
    elif dmask is not None:
        slot_count = w.mask.alpha.shape[0]
        if slot_count == 1:
            per_slot = dmask.sum(axis=0, keepdims=True)
        else:
            per_slot = dmask
        da_arr = np.empty_like(w.mask.alpha)
        ds_arr = np.empty_like(w.mask.sigma)
        for s in range(slot_count):
            da_arr[s], ds_arr[s] = mask_param_grads_arrays(
                w.mask.alpha[s], w.mask.sigma[s], w.mask.grid, w.mask.epsilon, per_slot[s]
            )
        grads.mask_alpha = da_arr
        grads.mask_sigma = ds_arr
    return grads
