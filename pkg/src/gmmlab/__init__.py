"""Gaussian-mixture attention masks, a tiny from-scratch vision transformer,
mask fitting, and the experiment CLI."""

from .mask import (
    DEFAULT_EPS,
    ElementwiseMask,
    GaussianKernel,
    GmmMaskBank,
    OffsetPair,
    elm_new,
    elm_param_count,
    gmm_param_count,
    init_kernels,
    mask_param_grads,
    offset_of,
    unfold_mask,
    weight_matrix,
)
from .model import Checkpoint, RunConfig, TinyViT, load_checkpoint, save_checkpoint, train
from .numerics import Rng, cosine_lr, matmul, softmax_rows

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_EPS",
    "Checkpoint",
    "ElementwiseMask",
    "GaussianKernel",
    "GmmMaskBank",
    "OffsetPair",
    "Rng",
    "RunConfig",
    "TinyViT",
    "cosine_lr",
    "elm_new",
    "elm_param_count",
    "gmm_param_count",
    "init_kernels",
    "load_checkpoint",
    "mask_param_grads",
    "matmul",
    "offset_of",
    "save_checkpoint",
    "softmax_rows",
    "train",
    "unfold_mask",
    "weight_matrix",
]
