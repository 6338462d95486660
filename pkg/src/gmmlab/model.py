"""Tiny vision transformer with masked attention, trained by hand-written
backprop.

Pipeline per image: non-overlapping p x p patches -> linear embedding ->
learnable position embeddings -> depth x (pre-LN attention block with
residual, pre-LN MLP block with residual) -> final layer norm -> mean over
tokens (no class token) -> linear classifier.  The attention mask is one of
none / gmm / elm per the run configuration.

Parameters live in an ordered name -> float64 array dict so the optimizer,
gradient checks, and the checkpoint format all share one flat view.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import data as data_mod
from .attention import (
    AttentionWeights,
    GmmSlot,
    attention_backward,
    attention_forward_batched,
)
from .fileio import FormatError, atomic_write_bytes
from .mask import ElementwiseMask, GmmMaskBank, elm_param_count, gmm_param_count
from .numerics import (
    AdamWState,
    Rng,
    adamw_step,
    cosine_lr,
    gelu_with_grad,
    layer_norm_backward_cached,
    layer_norm_cached,
    matmul,
)

MASK_MODES = ("none", "gmm", "elm")

# Model-side kernel init: a mild positive locality prior.  The wide
# random-sign distributions that suit long training schedules start half the
# masks anti-local and measurably wash out the mask's benefit over the short
# schedules this model targets, so fresh models begin with small positive
# weights and neighborhood-scale widths instead.
MASK_INIT_MEAN_ALPHA = 0.5
MASK_INIT_STD_ALPHA = 0.25
MASK_INIT_MEAN_SIGMA = 3.0
MASK_INIT_STD_SIGMA = 1.0


@dataclass
class RunConfig:
    """Everything that determines an experiment, serializable as flat keys."""

    dataset: str = "synth"
    image_size: int = 32
    channels: int = 1
    classes: int = 4
    patch: int = 4
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    mask_mode: str = "gmm"
    kernels: int = 5
    shared_kernels: bool = False
    mask_after_softmax: bool = False
    mask_eps: float = 1e-6
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    warmup: int = 0  # kept fixed at 0
    augment: bool = False
    train_size: int = 2000
    test_size: int = 500
    seed: int = 0

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    def validate(self) -> None:
        if self.dataset not in ("synth", "cifar10"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        for name in ("image_size", "channels", "classes", "patch", "dim", "depth",
                     "heads", "mlp_ratio", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("epochs", "kernels", "train_size", "test_size", "warmup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.image_size % self.patch != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.lr < 0 or self.min_lr < 0 or self.weight_decay < 0 or self.mask_eps <= 0:
            raise ValueError("lr, min_lr, weight_decay must be >= 0 and mask_eps > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


# -----------------------------------------------------------------------------
# Patch extraction and embedding
# -----------------------------------------------------------------------------


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """(C, S, S) image -> (N, p*p*C) patch matrix.

    Patches run row-major over the grid, pixels row-major within a patch,
    channels outermost (vector index = c*p*p + py*p + px).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise ValueError(f"expected square (C, S, S) image, got {image.shape}")
    return patchify_batch(image[None], p)[0]


def patchify_batch(batch: np.ndarray, p: int) -> np.ndarray:
    """(B, C, S, S) -> (B, N, p*p*C) with the patchify layout per image."""
    batch = np.asarray(batch, dtype=np.float64)
    b, c, s, s2 = batch.shape
    if s != s2:
        raise ValueError(f"expected square images, got {batch.shape}")
    if s % p != 0:
        raise ValueError(f"image side {s} not divisible by patch size {p}")
    g = s // p
    v = batch.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(v.reshape(b, g * g, c * p * p))


def patch_embed(image: np.ndarray, p: int, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Patchify then project to the embedding width: patches @ w + b."""
    return matmul(patchify(image, p), w) + b


# -----------------------------------------------------------------------------
# Model
# -----------------------------------------------------------------------------


@dataclass
class TinyViT:
    config: RunConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: RunConfig, rng: Rng | None = None) -> "TinyViT":
        """Fresh parameters; weight draws come from rng in a fixed order."""
        config.validate()
        rng = rng if rng is not None else Rng(config.seed)
        c = config
        n, d = c.tokens, c.dim
        pvec = c.patch * c.patch * c.channels
        hid = c.mlp_ratio * d

        def norm(rows, cols, std):
            return rng.normals(rows * cols, 0.0, std).reshape(rows, cols)

        params: dict[str, np.ndarray] = {}
        params["patch_embed.w"] = norm(pvec, d, pvec**-0.5)
        params["patch_embed.b"] = np.zeros(d)
        params["pos"] = norm(n, d, 0.02)

        bank = None
        if c.mask_mode == "gmm":
            bank = GmmMaskBank.init(
                rng, c.depth, c.heads, c.kernels, c.grid,
                shared_heads=c.shared_kernels, epsilon=c.mask_eps,
                mean_alpha=MASK_INIT_MEAN_ALPHA, std_alpha=MASK_INIT_STD_ALPHA,
                mean_sigma=MASK_INIT_MEAN_SIGMA, std_sigma=MASK_INIT_STD_SIGMA,
            )
        for i in range(c.depth):
            pre = f"block{i}"
            params[f"{pre}.ln1.g"] = np.ones(d)
            params[f"{pre}.ln1.b"] = np.zeros(d)
            for nm in ("w_q", "w_k", "w_v", "w_o"):
                params[f"{pre}.attn.{nm}"] = norm(d, d, d**-0.5)
            for nm in ("b_q", "b_k", "b_v", "b_o"):
                params[f"{pre}.attn.{nm}"] = np.zeros(d)
            if c.mask_mode == "gmm":
                params[f"{pre}.mask.alpha"] = bank.alpha[i].copy()
                params[f"{pre}.mask.sigma"] = bank.sigma[i].copy()
            elif c.mask_mode == "elm":
                params[f"{pre}.mask.elm"] = np.ones((n, n))
            params[f"{pre}.ln2.g"] = np.ones(d)
            params[f"{pre}.ln2.b"] = np.zeros(d)
            params[f"{pre}.mlp.w1"] = norm(d, hid, d**-0.5)
            params[f"{pre}.mlp.b1"] = np.zeros(hid)
            params[f"{pre}.mlp.w2"] = norm(hid, d, hid**-0.5)
            params[f"{pre}.mlp.b2"] = np.zeros(d)
        params["ln_f.g"] = np.ones(d)
        params["ln_f.b"] = np.zeros(d)
        params["head.w"] = norm(d, c.classes, d**-0.5)
        params["head.b"] = np.zeros(c.classes)
        return cls(config=config, params=params)

    def attn_weights(self, block: int) -> AttentionWeights:
        """AttentionWeights view over this block's parameter arrays."""
        p = self.params
        pre = f"block{block}"
        c = self.config
        mask = None
        if c.mask_mode == "gmm":
            mask = GmmSlot(
                alpha=p[f"{pre}.mask.alpha"], sigma=p[f"{pre}.mask.sigma"],
                grid=c.grid, epsilon=c.mask_eps,
            )
        elif c.mask_mode == "elm":
            mask = ElementwiseMask(values=p[f"{pre}.mask.elm"])
        return AttentionWeights(
            w_q=p[f"{pre}.attn.w_q"], b_q=p[f"{pre}.attn.b_q"],
            w_k=p[f"{pre}.attn.w_k"], b_k=p[f"{pre}.attn.b_k"],
            w_v=p[f"{pre}.attn.w_v"], b_v=p[f"{pre}.attn.b_v"],
            w_o=p[f"{pre}.attn.w_o"], b_o=p[f"{pre}.attn.b_o"],
            heads=c.heads, mask=mask, mask_after_softmax=c.mask_after_softmax,
        )

    def mask_bank(self) -> GmmMaskBank | None:
        """Reassembled kernel bank for a gmm-mode model (array views)."""
        c = self.config
        if c.mask_mode != "gmm":
            return None
        alpha = np.stack([self.params[f"block{i}.mask.alpha"] for i in range(c.depth)])
        sigma = np.stack([self.params[f"block{i}.mask.sigma"] for i in range(c.depth)])
        return GmmMaskBank(
            layers=c.depth, slots=alpha.shape[1], kernels_per_mask=c.kernels,
            grid=c.grid, alpha=alpha, sigma=sigma, epsilon=c.mask_eps,
        )

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def mask_param_count(self) -> int:
        return sum(p.size for k, p in self.params.items() if ".mask." in k)


def expected_mask_params(config: RunConfig) -> int:
    """Mask-parameter count implied by the configuration alone."""
    if config.mask_mode == "gmm":
        slots = 1 if config.shared_kernels else config.heads
        return gmm_param_count(config.kernels, slots, config.depth)
    if config.mask_mode == "elm":
        return elm_param_count(config.tokens, config.depth)
    return 0


# -----------------------------------------------------------------------------
# Forward / backward
# -----------------------------------------------------------------------------


@dataclass
class BatchTrace:
    patches: np.ndarray  # (B, N, P)
    blocks: list  # per block: (ln1 stats, attn_trace, ln2 stats, ln2_out, h_act, h_dact)
    ln_f_stats: tuple  # (xhat, inv) of the final layer norm
    pooled: np.ndarray  # (B, D)
    logits: np.ndarray  # (B, classes)


def forward_batch(model: TinyViT, batch: np.ndarray) -> BatchTrace:
    """Forward pass over a (B, C, S, S) batch, caching activations."""
    c = model.config
    p = model.params
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:] != (c.channels, c.image_size, c.image_size):
        raise ValueError(
            f"batch shape {batch.shape} does not match model geometry "
            f"(B, {c.channels}, {c.image_size}, {c.image_size})"
        )
    patches = patchify_batch(batch, c.patch)
    x = matmul(patches, p["patch_embed.w"]) + p["patch_embed.b"] + p["pos"]
    blocks = []
    for i in range(c.depth):
        pre = f"block{i}"
        ln1_out, xhat1, inv1 = layer_norm_cached(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        attn_out, attn_trace = attention_forward_batched(ln1_out, model.attn_weights(i))
        x_mid = x + attn_out
        ln2_out, xhat2, inv2 = layer_norm_cached(x_mid, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        h_pre = matmul(ln2_out, p[f"{pre}.mlp.w1"]) + p[f"{pre}.mlp.b1"]
        h_act, h_dact = gelu_with_grad(h_pre)
        mlp_out = matmul(h_act, p[f"{pre}.mlp.w2"]) + p[f"{pre}.mlp.b2"]
        x = x_mid + mlp_out
        blocks.append(((xhat1, inv1), attn_trace, (xhat2, inv2), ln2_out, h_act, h_dact))
    fin, xhat_f, inv_f = layer_norm_cached(x, p["ln_f.g"], p["ln_f.b"])
    pooled = fin.mean(axis=1)
    logits = matmul(pooled, p["head.w"]) + p["head.b"]
    return BatchTrace(patches=patches, blocks=blocks, ln_f_stats=(xhat_f, inv_f),
                      pooled=pooled, logits=logits)


def backward_batch(
    model: TinyViT, trace: BatchTrace, dlogits: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients for every parameter given dLoss/dLogits."""
    c = model.config
    p = model.params
    n = c.tokens
    b = trace.logits.shape[0]
    fold = lambda t: t.reshape(b * n, -1)
    grads: dict[str, np.ndarray] = {}

    grads["head.w"] = matmul(trace.pooled.T, dlogits)
    grads["head.b"] = dlogits.sum(axis=0)
    dpooled = matmul(dlogits, p["head.w"].T)
    dfin = np.repeat(dpooled[:, None, :], n, axis=1) / n
    dx, grads["ln_f.g"], grads["ln_f.b"] = layer_norm_backward_cached(
        *trace.ln_f_stats, p["ln_f.g"], dfin
    )

    for i in reversed(range(c.depth)):
        pre = f"block{i}"
        ln1_stats, attn_trace, ln2_stats, ln2_out, h_act, h_dact = trace.blocks[i]
        # MLP branch
        dh_act = matmul(dx, p[f"{pre}.mlp.w2"].T)
        grads[f"{pre}.mlp.w2"] = matmul(fold(h_act).T, fold(dx))
        grads[f"{pre}.mlp.b2"] = fold(dx).sum(axis=0)
        dh_pre = dh_act * h_dact
        dln2 = matmul(dh_pre, p[f"{pre}.mlp.w1"].T)
        grads[f"{pre}.mlp.w1"] = matmul(fold(ln2_out).T, fold(dh_pre))
        grads[f"{pre}.mlp.b1"] = fold(dh_pre).sum(axis=0)
        dx_mid, grads[f"{pre}.ln2.g"], grads[f"{pre}.ln2.b"] = layer_norm_backward_cached(
            *ln2_stats, p[f"{pre}.ln2.g"], dln2
        )
        dx_mid = dx_mid + dx  # residual
        # Attention branch
        ag = attention_backward(attn_trace, dx_mid)
        grads[f"{pre}.attn.w_q"] = ag.w_q
        grads[f"{pre}.attn.b_q"] = ag.b_q
        grads[f"{pre}.attn.w_k"] = ag.w_k
        grads[f"{pre}.attn.b_k"] = ag.b_k
        grads[f"{pre}.attn.w_v"] = ag.w_v
        grads[f"{pre}.attn.b_v"] = ag.b_v
        grads[f"{pre}.attn.w_o"] = ag.w_o
        grads[f"{pre}.attn.b_o"] = ag.b_o
        if ag.mask_alpha is not None:
            grads[f"{pre}.mask.alpha"] = ag.mask_alpha
            grads[f"{pre}.mask.sigma"] = ag.mask_sigma
        if ag.mask_elm is not None:
            grads[f"{pre}.mask.elm"] = ag.mask_elm
        dln1_in, grads[f"{pre}.ln1.g"], grads[f"{pre}.ln1.b"] = layer_norm_backward_cached(
            *ln1_stats, p[f"{pre}.ln1.g"], ag.x
        )
        dx = dx_mid + dln1_in  # residual

    grads["pos"] = dx.sum(axis=0)
    grads["patch_embed.w"] = matmul(fold(trace.patches).T, fold(dx))
    grads["patch_embed.b"] = fold(dx).sum(axis=0)
    return {k: grads[k] for k in p}  # canonical parameter order


def forward_image(model: TinyViT, image: np.ndarray) -> np.ndarray:
    """Logits for one (C, S, S) image."""
    return forward_batch(model, np.asarray(image, dtype=np.float64)[None]).logits[0]


def forward(model: TinyViT, batch: np.ndarray) -> np.ndarray:
    """Logits (B, classes) for a (B, C, S, S) batch, chunked to bound memory."""
    batch = np.asarray(batch, dtype=np.float64)
    step = max(1, model.config.batch_size)
    outs = [forward_batch(model, batch[lo : lo + step]).logits
            for lo in range(0, len(batch), step)]
    return np.concatenate(outs, axis=0)


def zero_grads(model: TinyViT) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def _loss_grads_hits(
    model: TinyViT, batch: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[str, np.ndarray], int]:
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    classes = model.config.classes
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    b = len(batch)
    trace = forward_batch(model, batch)
    hits = int((np.argmax(trace.logits, axis=1) == labels).sum())
    shifted = trace.logits - trace.logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float((lse[:, 0] - shifted[np.arange(b), labels]).mean())
    dlogits = np.exp(shifted - lse)
    dlogits[np.arange(b), labels] -= 1.0
    grads = backward_batch(model, trace, dlogits / b)
    return loss, grads, hits


def loss_and_grads(
    model: TinyViT, batch: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and gradients for every parameter."""
    loss, grads, _ = _loss_grads_hits(model, batch, labels)
    return loss, grads


def evaluate(model: TinyViT, samples: list) -> float:
    """Top-1 accuracy over a sample list (ties resolve to the lowest index)."""
    if not samples:
        return 0.0
    logits = forward(model, np.stack([s.image for s in samples]))
    labels = np.array([s.label for s in samples])
    return float((np.argmax(logits, axis=1) == labels).mean())


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GMMCKPT1"
CHECKPOINT_VERSION = 1
_ADAM_M = "adam.m/"
_ADAM_V = "adam.v/"


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    version: int = CHECKPOINT_VERSION


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialize: magic, u32 version, body, trailing CRC32 of the body.

    Body: length-prefixed canonical config JSON, u64 step, u64 epoch, u32
    tensor count, then per tensor a length-prefixed name, u32 ndim, u64 dims,
    and the raw little-endian float64 payload.  All integers little-endian.
    """
    body = bytearray()
    cfg = json.dumps(ckpt.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    body += struct.pack("<I", len(cfg)) + cfg
    body += struct.pack("<QQ", ckpt.step, ckpt.epoch)
    tensors = list(ckpt.params.items())
    tensors += [(_ADAM_M + k, v) for k, v in ckpt.adam_m.items()]
    tensors += [(_ADAM_V + k, v) for k, v in ckpt.adam_v.items()]
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor {name!r}")
        nb = name.encode("utf-8")
        body += struct.pack("<I", len(nb)) + nb
        body += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            body += struct.pack("<Q", dim)
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body = bytes(body)
    return CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + body + struct.pack(
        "<I", zlib.crc32(body)
    )


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    if len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise FormatError("truncated checkpoint")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}")
    body = raw[12:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint CRC mismatch (corrupt file)")
    cur = _Cursor(body)
    cfg = RunConfig.from_dict(json.loads(cur.take(cur.u32()).decode("utf-8")))
    step = cur.u64()
    epoch = cur.u64()
    count = cur.u32()
    params: dict[str, np.ndarray] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = cur.take(cur.u32()).decode("utf-8")
        ndim = cur.u32()
        shape = tuple(cur.u64() for _ in range(ndim))
        sz = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(cur.take(8 * sz), dtype="<f8").reshape(shape).copy()
        if name.startswith(_ADAM_M):
            adam_m[name[len(_ADAM_M):]] = arr
        elif name.startswith(_ADAM_V):
            adam_v[name[len(_ADAM_V):]] = arr
        else:
            params[name] = arr
    if cur.pos != len(body):
        raise FormatError("trailing bytes in checkpoint body")
    return Checkpoint(config=cfg, params=params, adam_m=adam_m, adam_v=adam_v,
                      step=step, epoch=epoch, version=version)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    atomic_write_bytes(path, checkpoint_bytes(ckpt))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# -----------------------------------------------------------------------------
# Training loop
# -----------------------------------------------------------------------------


def _epoch_rng(seed: int, epoch: int) -> Rng:
    # Derived, not carried: resuming at an epoch boundary rebuilds the exact
    # shuffle/augment stream without persisting generator state.
    return Rng(seed).spawn(1 + epoch)


def train(
    config: RunConfig,
    train_data: list,
    test_data: list,
    start: Checkpoint | None = None,
    stop_after: int | None = None,
) -> tuple[list[dict], Checkpoint]:
    """Train per the config; returns (per-epoch metrics history, checkpoint).

    ``start`` resumes from a checkpoint written at an epoch boundary;
    ``stop_after`` ends the run early (same schedule horizon), producing a
    checkpoint that resumes bitwise-identically to an uninterrupted run.
    """
    config.validate()
    if train_data:
        img = train_data[0].image
        if img.shape != (config.channels, config.image_size, config.image_size):
            raise ValueError(
                f"dataset images are {img.shape}, model expects "
                f"({config.channels}, {config.image_size}, {config.image_size})"
            )
    model = TinyViT.init(config)
    state = AdamWState.for_params(model.params)
    start_epoch = 0
    if start is not None:
        if start.config != config:
            raise ValueError("checkpoint config does not match the run config")
        for k in model.params:
            model.params[k][...] = start.params[k]
            state.m[k][...] = start.adam_m[k]
            state.v[k][...] = start.adam_v[k]
        state.step = start.step
        start_epoch = start.epoch

    steps_per_epoch = max(1, -(-len(train_data) // config.batch_size))
    total_steps = max(1, steps_per_epoch * config.epochs)
    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)

    history: list[dict] = []
    for epoch in range(start_epoch, last_epoch):
        erng = _epoch_rng(config.seed, epoch)
        perm = erng.permutation(len(train_data))
        epoch_lr = cosine_lr(state.step, total_steps, config.lr, config.min_lr)
        loss_sum = 0.0
        hit_sum = 0
        for lo in range(0, len(train_data), config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            samples = [train_data[i] for i in idx]
            if config.augment:
                samples = [data_mod.augment(s, erng) for s in samples]
            batch = np.stack([s.image for s in samples])
            labels = np.array([s.label for s in samples])
            lr = cosine_lr(state.step, total_steps, config.lr, config.min_lr)
            loss, grads, hits = _loss_grads_hits(model, batch, labels)
            adamw_step(model.params, grads, state, lr, config.beta1, config.beta2,
                       weight_decay=config.weight_decay)
            loss_sum += loss * len(samples)
            hit_sum += hits
        history.append({
            "epoch": epoch,
            "lr": epoch_lr,
            "train_loss": loss_sum / max(1, len(train_data)),
            "train_acc": hit_sum / max(1, len(train_data)),
            "test_acc": evaluate(model, test_data),
        })
    ckpt = Checkpoint(
        config=config,
        params={k: v.copy() for k, v in model.params.items()},
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        step=state.step,
        epoch=max(start_epoch, last_epoch),
    )
    return history, ckpt
