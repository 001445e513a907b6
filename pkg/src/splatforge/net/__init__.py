"""Minimal sparse-3D-convolution network stack with reverse-mode autodiff."""

from .autodiff import Tensor, Parameter, backward
from .sparse import KernelMap, CoordContext, sparse_conv
from .layers import relu, concat, add, BatchNorm
from .unet import NetworkConfig, TransitionKernelModel, build_model, forward_unet
from .optim import AdamW
from .serialize import serialize_model, deserialize_model

__all__ = [
    "Tensor", "Parameter", "backward",
    "KernelMap", "CoordContext", "sparse_conv",
    "relu", "concat", "add", "BatchNorm",
    "NetworkConfig", "TransitionKernelModel", "build_model", "forward_unet",
    "AdamW", "serialize_model", "deserialize_model",
]
