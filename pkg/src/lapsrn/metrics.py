"""PSNR / SSIM on luminance and the benchmark evaluation harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import bicubic_resize, crop_to_multiple, extract_y, load_image
from .errors import DataError, InvalidArgumentError

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def shave(img: np.ndarray, n: int) -> np.ndarray:
    if n == 0:
        return img
    return img[n:-n, n:-n]


def _check_pair(ref, test):
    if ref.shape != test.shape:
        raise InvalidArgumentError(f"image sizes differ: {ref.shape} vs {test.shape}")
    if ref.ndim != 2:
        raise InvalidArgumentError(f"metrics expect single-channel images, got {ref.shape}")


def psnr(ref: np.ndarray, test: np.ndarray, shave_px: int = 0) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; ``inf`` when identical."""
    _check_pair(ref, test)
    if shave_px < 0 or 2 * shave_px >= min(ref.shape):
        raise InvalidArgumentError(f"shave {shave_px} leaves nothing of a {ref.shape} image")
    diff = shave(np.asarray(ref, np.float64), shave_px) - shave(np.asarray(test, np.float64), shave_px)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g  # (H-k+1, W)
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(ref: np.ndarray, test: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-inside 11x11 Gaussian (sigma 1.5) window positions."""
    _check_pair(ref, test)
    if min(ref.shape) < SSIM_WINDOW:
        raise InvalidArgumentError(f"image {ref.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    a = np.asarray(ref, np.float64)
    b = np.asarray(test, np.float64)
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    mu_ab = mu_a * mu_b
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_ab
    smap = ((2.0 * mu_ab + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return float(np.mean(smap))


# ---------------------------------------------------------------- harness

@dataclass
class EvalRecord:
    image: str
    psnr: float
    ssim: float
    ms: float


@dataclass
class EvalResult:
    records: list
    scale: int
    shave: int
    skipped: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.skipped

    @property
    def mean_psnr(self) -> float:
        return _mean(r.psnr for r in self.records)

    @property
    def mean_ssim(self) -> float:
        return _mean(r.ssim for r in self.records)

    @property
    def mean_ms(self) -> float:
        return _mean(r.ms for r in self.records)

    def rows(self):
        for r in self.records:
            yield r.image, r.psnr, r.ssim, r.ms
        yield "MEAN", self.mean_psnr, self.mean_ssim, self.mean_ms

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image", "psnr_db", "ssim", "ms"])
        for name, p, s, ms in self.rows():
            writer.writerow([name, _fmt(p), _fmt(s), _fmt(ms)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([
            {"image": name, "psnr_db": _jsonable(p), "ssim": _jsonable(s), "ms": _jsonable(ms)}
            for name, p, s, ms in self.rows()
        ], indent=1)


def _mean(values) -> float:
    vals = list(values)
    if not vals:
        return math.nan
    return math.fsum(vals) / len(vals)


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


def _jsonable(v: float):
    return "inf" if math.isinf(v) and v > 0 else v


Upscaler = Callable[[np.ndarray, int], np.ndarray]


def bicubic_upscaler(lr_y: np.ndarray, scale: int) -> np.ndarray:
    h, w = lr_y.shape
    return bicubic_resize(lr_y, h * scale, w * scale)


def model_upscaler(model) -> Upscaler:
    from .model import super_resolve

    def run(lr_y, scale):
        return super_resolve(model, lr_y, scale)[-1]

    return run


def evaluate_dataset(upscaler: Union[str, Upscaler, object], images: Sequence, scale: int,
                     shave_px: Optional[int] = None) -> EvalResult:
    """Score an upscaler on HR images, each cropped to a multiple of ``scale`` and bicubic-downscaled.

    ``upscaler`` is ``"bicubic"``, a model, or any ``f(lr_y, scale) -> sr_y``.
    Metrics use the luminance channel with ``shave_px`` (default ``scale``)
    pixels cut from every border.  Missing or unreadable files are skipped and
    listed in ``EvalResult.skipped``.
    """
    if upscaler == "bicubic":
        fn = bicubic_upscaler
    elif callable(upscaler):
        fn = upscaler
    else:
        fn = model_upscaler(upscaler)
    sh = scale if shave_px is None else shave_px
    records = []
    skipped = []
    for path in sorted(Path(p) for p in images):
        try:
            hr = load_image(path)
        except DataError as exc:
            log.warning("skipping %s: %s", path, exc)
            skipped.append(str(path))
            continue
        hr_y = extract_y(crop_to_multiple(hr, scale))
        h, w = hr_y.shape
        lr_y = bicubic_resize(hr_y, h // scale, w // scale)
        t0 = time.perf_counter()
        sr_y = fn(lr_y, scale)
        ms = (time.perf_counter() - t0) * 1e3
        records.append(EvalRecord(path.stem, psnr(hr_y, sr_y, sh), ssim(shave(hr_y, sh), shave(sr_y, sh)), ms))
    return EvalResult(records=records, scale=scale, shave=sh, skipped=skipped)
