"""Sparse convolutional building blocks with reverse-mode gradients."""

from . import functional
from .layers import (
    Coords,
    Graph,
    down_conv_s2,
    irn_forward,
    irn_kernels,
    relu,
    sigmoid,
    sparse_conv,
    up_conv_s2,
)
from .tape import GradientTape, TapeStateError, Var, backward
from .weights import (
    ConvKernel,
    MissingLayerError,
    ModelWeights,
    ParamSet,
    WeightFormatError,
    WeightVersionError,
    load_weights,
    save_weights,
)

__all__ = [
    "functional",
    "Coords",
    "Graph",
    "down_conv_s2",
    "irn_forward",
    "irn_kernels",
    "relu",
    "sigmoid",
    "sparse_conv",
    "up_conv_s2",
    "GradientTape",
    "TapeStateError",
    "Var",
    "backward",
    "ConvKernel",
    "MissingLayerError",
    "ModelWeights",
    "ParamSet",
    "WeightFormatError",
    "WeightVersionError",
    "load_weights",
    "save_weights",
]
