from typing import Optional, Tuple

import numpy as np

from app.autodiff.rng import Rng
from app.autodiff.tensor import Tensor


def trunc_normal(rng: Rng, shape: Tuple[int, ...], std: float = 0.02, dtype=np.float32,
                 name: Optional[str] = None) -> Tensor:
    """Normal(0, std) resampled until every draw lies within two standard deviations."""
    values = rng.normal(0.0, std, size=shape)
    bad = np.abs(values) > 2 * std
    while bad.any():
        values[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(values) > 2 * std
    return Tensor(values.astype(dtype), requires_grad=True, name=name)


def zeros(shape: Tuple[int, ...], dtype=np.float32, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def ones(shape: Tuple[int, ...], dtype=np.float32, name: Optional[str] = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)
