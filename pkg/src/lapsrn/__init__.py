"""Laplacian pyramid super-resolution network in plain numpy.

The package is split by concern: ``tensor`` and ``layers`` hold the
differentiable primitives, ``model`` the pyramid network, ``data`` image I/O
and resampling, ``trainer`` the optimization loop, ``metrics`` PSNR/SSIM and
the benchmark harness, ``checkpoint`` the ``.lpsr`` format and ``cli`` the
``lapsrn`` command.
"""
__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .data import bicubic_resize, build_gt_pyramid, extract_y, load_image, save_image
from .errors import (
    CapabilityError,
    CheckpointError,
    DataError,
    InvalidArgumentError,
    LapSRNError,
    NumericError,
)
from .metrics import EvalResult, evaluate_dataset, psnr, ssim
from .model import LapSRN, LapSRNConfig, build_model, count_layers, layer_table, super_resolve
from .trainer import TrainConfig, train

__all__ = [
    "CapabilityError", "CheckpointError", "DataError", "EvalResult", "InvalidArgumentError",
    "LapSRN", "LapSRNConfig", "LapSRNError", "NumericError", "TrainConfig",
    "bicubic_resize", "build_gt_pyramid", "build_model", "count_layers", "evaluate_dataset",
    "extract_y", "layer_table", "load_checkpoint", "load_image", "psnr", "save_checkpoint",
    "save_image", "ssim", "super_resolve", "train",
]
