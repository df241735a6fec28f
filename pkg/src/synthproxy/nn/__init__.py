"""Minimal tensor library: reverse-mode autodiff, layers, Adam, checkpoints.

Training runs in float32; gradient verification converts modules to float64
(`Module.astype`) so finite differences resolve cleanly.
"""

from synthproxy.nn.tensor import Tensor
from synthproxy.nn.layers import (
    BatchNorm,
    BiGRU,
    Conv2d,
    Embedding,
    GRUCell,
    Highway,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
    SinusoidalPE,
    TransformerBlock,
    conv2d,
)
from synthproxy.nn.optim import Adam, cosine_restart_lr
from synthproxy.nn.gradcheck import grad_check
from synthproxy.nn.checkpoint import (
    CheckpointFormatError,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "Tensor",
    "Module",
    "Linear",
    "BatchNorm",
    "LayerNorm",
    "Highway",
    "Embedding",
    "GRUCell",
    "BiGRU",
    "SinusoidalPE",
    "MultiHeadSelfAttention",
    "TransformerBlock",
    "Conv2d",
    "conv2d",
    "Adam",
    "cosine_restart_lr",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointFormatError",
]
