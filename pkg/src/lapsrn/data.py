"""Image I/O, color conversion, bicubic resampling and training-batch sampling.

Images are float64 numpy arrays with values in [0, 1]: shape (H, W) for
luminance, (H, W, 3) for color.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError, InvalidArgumentError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp")
_FORMATS = {".png": "PNG", ".bmp": "BMP"}


# ---------------------------------------------------------------- I/O

def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG or BMP; gray files give (H, W), everything else (H, W, 3)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "BMP"):
                raise DataError(f"{path}: unsupported image format {im.format}")
            if im.mode in ("I", "I;16", "I;16B", "F"):
                raise DataError(f"{path}: only 8-bit images are supported (mode {im.mode})")
            if im.mode in ("L", "LA"):
                arr = np.asarray(im.convert("L"))
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to uint8, rounding halves away from zero."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise DataError(f"{path}: output must be .png or .bmp")
    data = to_bytes(img)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path, format=fmt)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_manifest(path) -> list[Path]:
    """Image paths listed one per line, relative to the manifest's directory."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    return [root / line.strip() for line in lines if line.strip() and not line.lstrip().startswith("#")]


# ---------------------------------------------------------------- color

_RGB2YCBCR = np.array([
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
]) / 255.0
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0]) / 255.0
_YCBCR2RGB = np.linalg.inv(_RGB2YCBCR)


def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing conversion, both sides scaled to [0, 1]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgumentError(f"rgb_to_ycbcr needs an (H, W, 3) image, got {img.shape}")
    return img @ _RGB2YCBCR.T + _YCBCR_OFFSET


def ycbcr_to_rgb(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgumentError(f"ycbcr_to_rgb needs an (H, W, 3) image, got {img.shape}")
    return np.clip((img - _YCBCR_OFFSET) @ _YCBCR2RGB.T, 0.0, 1.0)


def extract_y(img: np.ndarray) -> np.ndarray:
    """Luminance of a color image; gray images pass through unchanged."""
    if img.ndim == 2:
        return img
    return rgb_to_ycbcr(img)[..., 0]


# ---------------------------------------------------------------- resampling

def cubic(x):
    """Keys cubic convolution kernel with a = -0.5."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return ((1.5 * ax3 - 2.5 * ax2 + 1.0) * (ax <= 1)
            + (-0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0) * ((ax > 1) & (ax <= 2)))


def resize_weights(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    """Dense (out_len, in_len) matrix of bicubic taps along one axis.

    Downscaling with ``antialias`` widens the kernel by 1/scale.  Taps that
    fall outside the input are clamped onto the edge pixels; every row sums to 1.
    """
    scale = out_len / in_len
    width = 4.0
    if antialias and scale < 1:
        width /= scale
        kernel = lambda d: scale * cubic(scale * d)  # noqa: E731
    else:
        kernel = cubic
    u = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None].astype(np.int64) + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1)
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, idx.ravel()), w.ravel())
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Separable bicubic resize; output clamped to [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise InvalidArgumentError(f"output size must be >= 1, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return np.array(img, dtype=np.float64)
    rh = resize_weights(h, out_h, antialias)
    rw = resize_weights(w, out_w, antialias)
    if img.ndim == 2:
        out = rh @ img @ rw.T
    else:
        out = np.einsum("ih,hwc,jw->ijc", rh, img, rw, optimize=True)
    return np.clip(out, 0.0, 1.0)


def crop_to_multiple(img: np.ndarray, m: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % m, : w - w % m]


# ---------------------------------------------------------------- pyramid

@dataclass
class GroundTruthPyramid:
    """Per-level targets, coarsest first; ``levels[-1]`` is the HR image itself."""

    lr: np.ndarray
    levels: list


def build_gt_pyramid(hr: np.ndarray, scale: int) -> GroundTruthPyramid:
    """Bicubic targets for each 2x level plus the LR input, each made by one direct resize of ``hr``."""
    if hr.ndim != 2:
        raise InvalidArgumentError(f"pyramid targets are single-channel, got shape {hr.shape}")
    if scale < 2 or scale & (scale - 1):
        raise InvalidArgumentError(f"scale must be a power of two >= 2, got {scale}")
    h, w = hr.shape
    if h % scale or w % scale:
        raise InvalidArgumentError(f"HR size {h}x{w} is not divisible by scale {scale}; crop_to_multiple first")
    n = int(np.log2(scale))
    levels = [bicubic_resize(hr, h >> (n - s), w >> (n - s)) for s in range(1, n + 1)]
    return GroundTruthPyramid(lr=bicubic_resize(hr, h // scale, w // scale), levels=levels)


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    rotations: int = 0  # quarter turns, counter-clockwise
    flip_h: bool = False
    flip_v: bool = False


def draw_augment_params(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        scale=float(rng.uniform(0.5, 1.0)),
        rotations=int(rng.integers(4)),
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
    )


def apply_augment(img: np.ndarray, p: AugmentParams) -> np.ndarray:
    if p.scale != 1.0:
        h, w = img.shape[:2]
        img = bicubic_resize(img, max(1, round(h * p.scale)), max(1, round(w * p.scale)))
    img = np.rot90(img, p.rotations)
    if p.flip_h:
        img = img[:, ::-1]
    if p.flip_v:
        img = img[::-1]
    return np.ascontiguousarray(img)


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random downscale in [0.5, 1], quarter-turn rotation, and independent h/v flips."""
    return apply_augment(img, draw_augment_params(rng))


# ---------------------------------------------------------------- batches

@dataclass
class TrainBatch:
    lr: np.ndarray  # (N, 1, p/S, p/S)
    targets: list  # per level, (N, 1, p/2^(L-s), ...)


def sample_batch(corpus: Sequence[np.ndarray], rng: np.random.Generator, n: int = 64,
                 patch: int = 128, scale: int = 4, use_augment: bool = True,
                 dtype=np.float32) -> TrainBatch:
    """Draw ``n`` augmented HR patches and their bicubic pyramids.

    Augmentation happens on the whole image before cropping.  Images too small
    to yield a patch after the worst-case 0.5 downscale are skipped with a warning.
    """
    if not corpus:
        raise InvalidArgumentError("empty training corpus")
    if patch % scale:
        raise InvalidArgumentError(f"patch size {patch} is not divisible by scale {scale}")
    need = 2 * patch if use_augment else patch
    usable = []
    for i, img in enumerate(corpus):
        if min(img.shape[:2]) < need:
            log.warning("skipping corpus image %d (%dx%d): smaller than %d px", i, *img.shape[:2], need)
        else:
            usable.append(img)
    if not usable:
        raise DataError(f"no corpus image is at least {need}x{need} pixels")

    lr = []
    levels = []
    for _ in range(n):
        img = usable[int(rng.integers(len(usable)))]
        if use_augment:
            img = augment(img, rng)
        h, w = img.shape[:2]
        top = int(rng.integers(h - patch + 1))
        left = int(rng.integers(w - patch + 1))
        pyr = build_gt_pyramid(img[top:top + patch, left:left + patch], scale)
        lr.append(pyr.lr)
        levels.append(pyr.levels)
    return TrainBatch(
        lr=np.stack(lr)[:, None].astype(dtype),
        targets=[np.stack([lv[s] for lv in levels])[:, None].astype(dtype) for s in range(len(levels[0]))],
    )


def load_corpus(directory) -> list[np.ndarray]:
    """Luminance channels of every PNG/BMP in ``directory``."""
    paths = list_images(directory)
    if not paths:
        raise DataError(f"no PNG/BMP images in {directory}")
    return [extract_y(load_image(p)) for p in paths]
