"""Forward and backward passes for every layer the pyramid network uses.

All functions are pure: they take arrays, return new arrays, and keep no
state.  Convolution is cross-correlation (no kernel flip).  The fast paths
are im2col via ``sliding_window_view`` + ``tensordot`` and a k*k-step
col2im scatter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError

LRELU_SLOPE = 0.2
CHARBONNIER_EPS = 1e-3


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a square convolution or transposed convolution."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    transposed: bool = False

    def weight_shape(self) -> tuple[int, int, int, int]:
        if self.transposed:
            return (self.in_channels, self.out_channels, self.kernel, self.kernel)
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.pad
        if self.transposed:
            return (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k
        return _conv_out(h, k, s, p), _conv_out(w, k, s, p)


@dataclass(frozen=True)
class CharbonnierSpec:
    epsilon: float = CHARBONNIER_EPS

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgumentError(f"charbonnier epsilon must be > 0, got {self.epsilon}")


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    span = n + 2 * p - k
    if span < 0 or span % s:
        raise InvalidArgumentError(
            f"non-integral conv output size: (size {n} + 2*pad {p} - kernel {k}) / stride {s}")
    return span // s + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Strided k*k patches of a padded tensor, shape (N, C, ho, wo, k, k)."""
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]


def _scatter(cols: np.ndarray, out_hw: tuple[int, int], s: int) -> np.ndarray:
    """Adjoint of ``_windows``: sum (N, ho, wo, C, k, k) patches into (N, C, H, W)."""
    n, ho, wo, c, k, _ = cols.shape
    out = np.zeros((n, c) + out_hw, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    return out


def _check_channels(x, expected, what):
    if x.shape[1] != expected:
        raise InvalidArgumentError(f"{what}: input has {x.shape[1]} channels, weights expect {expected}")


# ---------------------------------------------------------------- convolution

def conv2d(x, weight, bias=None, *, stride=1, pad=0):
    """Zero-padded cross-correlation. ``weight`` is (out_c, in_c, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidArgumentError(f"conv2d needs rank-4 input and weight, got {x.shape}, {weight.shape}")
    _check_channels(x, weight.shape[1], "conv2d")
    k = weight.shape[2]
    ho = _conv_out(x.shape[2], k, stride, pad)
    wo = _conv_out(x.shape[3], k, stride, pad)
    win = _windows(_pad(x, pad), k, stride, ho, wo)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(grad_out, x, weight, *, stride=1, pad=0):
    """Returns (d_input, d_weight, d_bias)."""
    k = weight.shape[2]
    n, c, h, w = x.shape
    ho, wo = grad_out.shape[2:]
    xp = _pad(x, pad)
    win = _windows(xp, k, stride, ho, wo)
    d_weight = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    d_bias = grad_out.sum(axis=(0, 2, 3))
    cols = np.tensordot(grad_out, weight, axes=([1], [0]))  # (N, ho, wo, C, k, k)
    dxp = _scatter(cols, xp.shape[2:], stride)
    d_input = dxp[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(d_input), d_weight, d_bias


def transposed_conv2d(x, weight, *, stride=2, pad=1):
    """Transposed convolution: each input pixel scatters a weighted k*k footprint.

    ``weight`` is (in_c, out_c, k, k).  Output size is (H - 1)*stride - 2*pad + k,
    i.e. 2H for the 4x4 / stride 2 / pad 1 upsampler.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidArgumentError(
            f"transposed_conv2d needs rank-4 input and weight, got {x.shape}, {weight.shape}")
    _check_channels(x, weight.shape[0], "transposed_conv2d")
    n, c, h, w = x.shape
    k = weight.shape[2]
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    if hf - 2 * pad < 1 or wf - 2 * pad < 1:
        raise InvalidArgumentError(f"transposed_conv2d output would be empty for input {x.shape}")
    cols = np.tensordot(x, weight, axes=([1], [0]))  # (N, H, W, out_c, k, k)
    full = _scatter(cols, (hf, wf), stride)
    return np.ascontiguousarray(full[:, :, pad : hf - pad, pad : wf - pad])


def transposed_conv2d_backward(grad_out, x, weight, *, stride=2, pad=1):
    """Returns (d_input, d_weight)."""
    h, w = x.shape[2:]
    k = weight.shape[2]
    win = _windows(_pad(grad_out, pad), k, stride, h, w)  # (N, out_c, H, W, k, k)
    d_input = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    d_weight = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(d_input), d_weight


# ---------------------------------------------------------------- activation

def leaky_relu(x, slope=LRELU_SLOPE):
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(grad_out, x, slope=LRELU_SLOPE):
    # subgradient at exactly 0 is 1
    return np.where(x >= 0, grad_out, grad_out * grad_out.dtype.type(slope))


# ---------------------------------------------------------------- losses

def _check_same(pred, target, what):
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"{what}: prediction {pred.shape} and target {target.shape} differ")


def _norm(count, reduction):
    if reduction == "mean":
        return 1.0 / count
    if reduction == "sum":
        return 1.0
    raise InvalidArgumentError(f"unknown reduction {reduction!r}")


def charbonnier_loss(pred, target, spec: CharbonnierSpec | float = CHARBONNIER_EPS, reduction="mean"):
    """Robust penalty sqrt(d^2 + eps^2) averaged over every element.

    Returns ``(loss, grad)``; the loss is accumulated in float64, the gradient
    keeps the prediction's dtype.
    """
    _check_same(pred, target, "charbonnier_loss")
    eps = spec.epsilon if isinstance(spec, CharbonnierSpec) else CharbonnierSpec(float(spec)).epsilon
    scale = _norm(pred.size, reduction)
    diff = pred.astype(np.float64) - target
    rho = np.sqrt(diff * diff + eps * eps)
    loss = float(np.sum(rho) * scale)
    grad = (diff / rho * scale).astype(pred.dtype, copy=False)
    return loss, grad


def l2_loss(pred, target, reduction="mean"):
    _check_same(pred, target, "l2_loss")
    scale = _norm(pred.size, reduction)
    diff = pred.astype(np.float64) - target
    loss = float(np.sum(diff * diff) * scale)
    grad = (2.0 * scale * diff).astype(pred.dtype, copy=False)
    return loss, grad


# ---------------------------------------------------------------- initializers

def bilinear_taps(factor: int) -> np.ndarray:
    """1-D bilinear upsampling taps of length 2*factor, e.g. (.25, .75, .75, .25) for 2x."""
    if factor < 2 or factor & (factor - 1):
        raise InvalidArgumentError(f"bilinear factor must be a power of two >= 2, got {factor}")
    size = 2 * factor
    center = (size - 1) / 2.0
    return 1.0 - np.abs(np.arange(size) - center) / factor


def bilinear_kernel(size: int = 4, factor: int = 2, channels: int = 1) -> np.ndarray:
    """Transposed-conv weights that bilinearly upsample each channel independently.

    Shape (channels, channels, size, size); cross-channel entries are zero.
    Pair with stride ``factor`` and pad ``factor // 2``.
    """
    if size != 2 * factor:
        raise InvalidArgumentError(f"bilinear kernel size must be 2*factor, got size={size}, factor={factor}")
    taps = bilinear_taps(factor)
    k2 = np.outer(taps, taps)
    weight = np.zeros((channels, channels, size, size))
    for c in range(channels):
        weight[c, c] = k2
    return weight
