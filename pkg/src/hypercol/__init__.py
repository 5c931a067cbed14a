"""hypercol: multi-layer pooled-feature image classifier and OOD evaluation harness."""

from .tensor import Tensor, Tape, backward, grad_check
from .model import BackboneSpec, TapSpec, build_model

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "BackboneSpec",
    "TapSpec",
    "build_model",
    "__version__",
]
