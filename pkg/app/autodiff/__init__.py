# Tensor library with reverse-mode automatic differentiation
from app.autodiff.tensor import ComputationGraph, Tensor, as_tensor, no_grad

__all__ = ["ComputationGraph", "Tensor", "as_tensor", "no_grad"]
