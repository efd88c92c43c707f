"""effvit: hybrid CNN + ViT with low-rank adapters on a numpy autodiff core."""

__version__ = "0.1.0"

from .tensor import Tensor, ParamRegistry  # noqa: F401
