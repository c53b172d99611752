from typing import Callable, List, Sequence

import numpy as np

from app.autodiff.tensor import ComputationGraph, Tensor
from app.errors import ConfigurationError


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """max|analytic − numeric| over the larger gradient magnitude, never below ``floor``."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _difference(fn: Callable[..., Tensor], inputs: Sequence[Tensor], flat: np.ndarray, i: int, eps: float,
                order: int) -> float:
    saved = flat[i]

    def at(delta: float) -> float:
        flat[i] = saved + delta
        return fn(*inputs).item()

    try:
        if order == 2:
            return (at(eps) - at(-eps)) / (2 * eps)
        return (8.0 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
    finally:
        flat[i] = saved


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                    floor: float = 1e-12, order: int = 2) -> List[float]:
    """Compare reverse-mode gradients of a scalar ``fn`` with central differences.

    Returns the max relative error for every input that requires grad (0.0 for
    the others). ``fn`` must be deterministic. ``order`` 4 uses the five-point
    stencil; ``floor`` bounds the denominator for tensors whose gradient is
    close to zero.
    """
    if order not in (2, 4):
        raise ConfigurationError(f"finite-difference order must be 2 or 4, got {order}")
    for t in inputs:
        t.grad = None
        t.data = np.ascontiguousarray(t.data)
    with ComputationGraph() as graph:
        loss = fn(*inputs)
    graph.backward(loss)

    errors = []
    for t in inputs:
        if not t.requires_grad:
            errors.append(0.0)
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        out = numeric.reshape(-1)
        for i in range(flat.size):
            out[i] = _difference(fn, inputs, flat, i, eps, order)
        errors.append(relative_error(analytic, numeric, floor))
    return errors
