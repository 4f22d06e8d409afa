"""Bidirectional temporal convolutional networks for probabilistic forecasting."""

__version__ = "0.1.0"

from .model import BiTCN, HyperParams, InputDims, count_parameters  # noqa: E402
from .tensor import Tensor, no_grad  # noqa: E402

__all__ = ["BiTCN", "HyperParams", "InputDims", "Tensor", "count_parameters", "no_grad", "__version__"]
