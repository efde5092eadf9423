"""Rank-4 tensors, learnable parameters and the finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects laid out as (batch, channel,
height, width), C-contiguous.  Gradient checks run in float64; training and
inference run in float32.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgumentError, NumericError


def as_tensor4(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as a rank-4 NCHW tensor and return it contiguous."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise InvalidArgumentError(f"expected a rank-4 NCHW tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise InvalidArgumentError(f"tensor dimensions must be >= 1, got {arr.shape}")
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")
    return x


@dataclass
class Parameter:
    """A learnable tensor with its gradient accumulator and momentum buffer.

    ``decay`` marks whether weight decay applies (weights yes, biases no).
    """

    value: np.ndarray
    decay: bool = True
    grad: np.ndarray = field(init=False, repr=False)
    momentum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)

    def astype(self, dtype) -> "Parameter":
        p = Parameter(self.value.astype(dtype), decay=self.decay)
        p.grad[...] = self.grad
        p.momentum[...] = self.momentum
        return p


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"elementwise_add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def elementwise_add_backward(grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # d(a+b)/da = d(a+b)/db = identity
    return grad_out, grad_out


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5,
                           indices=None) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``f`` is called with a perturbed float64 copy of ``x``; the caller's
    array is never touched.  When ``indices`` (flat positions) is given only
    those coordinates are probed and a 1-D array of their partials is returned.
    """
    if not h > 0:
        raise InvalidArgumentError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    probe = range(flat.size) if indices is None else np.asarray(indices, dtype=np.intp)
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    if indices is not None:
        return gflat[probe]
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))
