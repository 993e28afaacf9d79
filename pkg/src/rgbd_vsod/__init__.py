"""Prompt-free RGB-D video salient object detection on a small numpy autodiff core."""
from .tensor import Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "precision", "__version__"]
