"""Dual CNN/Transformer feature fusion for person re-identification at toy scale."""

from .kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor

__all__ = ["Tensor", "KERNEL_BACKEND"]
__version__ = "0.1.0"
