"""Teleconnection-gated low-rank adaptation of a miniature windowed
transformer for extended-range grid forecasting."""

from .tensor import Tensor, ShapeError, GraphError, concat, conv_lag, matmul, no_grad
from .rng import RngStream

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "GraphError", "concat", "conv_lag", "matmul",
           "no_grad", "RngStream", "__version__"]
