"""Minimal reverse-mode autodiff on numpy arrays, with just enough layers.

Everything downstream (score networks, perception encoders, baselines) is
built on this package: a recording graph over numpy ops, a handful of layer
classes, AdamW, and a single-file checkpoint format.
"""

from .engine import Graph, GraphConsumedError, Param, Tensor
from .layers import (
    MLP,
    Conv1d,
    Conv3d,
    ConvTranspose1d,
    Dense,
    GroupNorm,
    Module,
)
from .optim import AdamW, OptimizerState
from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint

__all__ = [
    "Graph",
    "GraphConsumedError",
    "Param",
    "Tensor",
    "Module",
    "Dense",
    "MLP",
    "Conv1d",
    "ConvTranspose1d",
    "Conv3d",
    "GroupNorm",
    "AdamW",
    "OptimizerState",
    "save_checkpoint",
    "load_checkpoint",
    "load_into",
    "CheckpointError",
]
