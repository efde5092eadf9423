"""The two-branch Laplacian pyramid super-resolution network.

Per pyramid level the feature branch runs ``depth`` 3x3 convs, one 4x4
stride-2 transposed conv, and a 1-channel residual conv; the image branch
upsamples the previous level's output with a bilinear-initialized transposed
conv and adds the residual.  Both branches feed the next level, so a single
forward pass yields every intermediate scale.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import layers
from .errors import CapabilityError, InvalidArgumentError
from .layers import ConvSpec
from .tensor import Parameter, as_tensor4, elementwise_add

SCALES = (2, 4, 8)
LOSS_KINDS = ("charbonnier", "l2")


def default_depth(scale: int) -> int:
    return 5 if scale == 8 else 10


@dataclass
class LapSRNConfig:
    scale: int = 4
    depth: Optional[int] = None
    channels: int = 64
    lrelu_slope: float = layers.LRELU_SLOPE
    use_pyramid: bool = True
    use_residual: bool = True
    loss_kind: str = "charbonnier"
    charbonnier_eps: float = layers.CHARBONNIER_EPS

    def __post_init__(self):
        if self.scale not in SCALES:
            raise InvalidArgumentError(f"scale: must be one of {SCALES}, got {self.scale}")
        if self.depth is None:
            self.depth = default_depth(self.scale)
        if self.depth < 1:
            raise InvalidArgumentError(f"depth: must be >= 1, got {self.depth}")
        if self.channels < 1:
            raise InvalidArgumentError(f"channels: must be >= 1, got {self.channels}")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidArgumentError(f"loss_kind: must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not self.charbonnier_eps > 0:
            raise InvalidArgumentError(f"charbonnier_eps: must be > 0, got {self.charbonnier_eps}")

    @property
    def levels(self) -> int:
        """Number of pyramid levels actually built (1 without the pyramid)."""
        return int(math.log2(self.scale)) if self.use_pyramid else 1

    @property
    def level_factor(self) -> int:
        """Upsampling factor of one level."""
        return 2 if self.use_pyramid else self.scale

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LapSRNConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerInfo:
    name: str
    spec: ConvSpec
    branch: str  # input | feature | upsample | residual | image
    level: int
    activation: bool
    bias: bool


def layer_table(config: LapSRNConfig) -> list[LayerInfo]:
    """Every conv / transposed conv of the network, in forward order."""
    c = config.channels
    f = config.level_factor
    up = dict(kernel=2 * f, stride=f, pad=f // 2, transposed=True)
    table = [LayerInfo("input", ConvSpec(1, c, 3, 1, 1), "input", 0, True, True)]
    for s in range(1, config.levels + 1):
        for i in range(config.depth):
            table.append(LayerInfo(f"level{s}.conv{i}", ConvSpec(c, c, 3, 1, 1), "feature", s, True, True))
        table.append(LayerInfo(f"level{s}.feat_up", ConvSpec(c, c, **up), "upsample", s, True, False))
        table.append(LayerInfo(f"level{s}.residual", ConvSpec(c, 1, 3, 1, 1), "residual", s, False, True))
        if config.use_residual:
            table.append(LayerInfo(f"level{s}.img_up", ConvSpec(1, 1, **up), "image", s, False, False))
    return table


def count_layers(config: LapSRNConfig) -> int:
    """Convolution plus transposed-convolution count; 27 for the 4x, depth-10 model."""
    return len(layer_table(config))


class LapSRN:
    """Parameters plus forward/backward of the pyramid network.

    Build instances with :func:`build_model` or ``checkpoint.load_checkpoint``.
    """

    def __init__(self, config: LapSRNConfig, params: dict[str, Parameter]):
        self.config = config
        self.layers = layer_table(config)
        self._by_name = {info.name: info for info in self.layers}
        expected = self.param_shapes(config)
        if list(params) != list(expected):
            raise InvalidArgumentError("parameter names do not match the layer table")
        self.params = params

    @staticmethod
    def param_shapes(config: LapSRNConfig) -> dict[str, tuple]:
        shapes = {}
        for info in layer_table(config):
            shapes[f"{info.name}.weight"] = info.spec.weight_shape()
            if info.bias:
                shapes[f"{info.name}.bias"] = (info.spec.out_channels,)
        return shapes

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "LapSRN":
        return LapSRN(self.config, {k: p.astype(dtype) for k, p in self.params.items()})

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    # ------------------------------------------------------------ forward

    def levels_for_scale(self, scale: Optional[int]) -> int:
        cfg = self.config
        if scale is None:
            return cfg.levels
        if scale > cfg.scale or scale < 2 or scale & (scale - 1):
            raise CapabilityError(
                f"model supports power-of-two scales up to {cfg.scale}x, requested {scale}x")
        if not cfg.use_pyramid:
            if scale != cfg.scale:
                raise CapabilityError(f"single-step model only produces {cfg.scale}x, requested {scale}x")
            return 1
        return int(math.log2(scale))

    def forward(self, lr_image, scale: Optional[int] = None, cache: Optional[dict] = None) -> list[np.ndarray]:
        """Run the pyramid up to ``scale`` (default: full) and return every level's output.

        Pass a dict as ``cache`` to keep the activations needed by :meth:`backward`.
        Levels beyond ``scale`` are never computed.
        """
        x = as_tensor4(lr_image, dtype=self.dtype)
        if x.shape[1] != 1:
            raise InvalidArgumentError(f"expected a single-channel (luminance) input, got {x.shape[1]} channels")
        if min(x.shape[2:]) < 3:
            raise InvalidArgumentError(f"input must be at least 3x3 pixels, got {x.shape[2]}x{x.shape[3]}")
        n_levels = self.levels_for_scale(scale)
        record = cache is not None
        if record:
            cache.clear()
            cache["levels"] = n_levels

        feat = self._apply("input", x, cache)
        img = x
        outputs = []
        for s in range(1, n_levels + 1):
            for i in range(self.config.depth):
                feat = self._apply(f"level{s}.conv{i}", feat, cache)
            feat = self._apply(f"level{s}.feat_up", feat, cache)
            residual = self._apply(f"level{s}.residual", feat, cache)
            if self.config.use_residual:
                upsampled = self._apply(f"level{s}.img_up", img, cache)
                out = elementwise_add(upsampled, residual)
            else:
                out = residual
            outputs.append(out)
            img = out
        return outputs

    def _apply(self, name, x, cache):
        info = self._by_name[name]
        spec = info.spec
        w = self.params[f"{name}.weight"].value
        if spec.transposed:
            z = layers.transposed_conv2d(x, w, stride=spec.stride, pad=spec.pad)
        else:
            b = self.params[f"{name}.bias"].value if info.bias else None
            z = layers.conv2d(x, w, b, stride=spec.stride, pad=spec.pad)
        if cache is not None:
            cache[name] = (x, z)
        return layers.leaky_relu(z, self.config.lrelu_slope) if info.activation else z

    # ------------------------------------------------------------ backward

    def backward(self, cache: dict, grads: list) -> np.ndarray:
        """Accumulate parameter gradients given d(loss)/d(output) for each level.

        ``grads`` entries may be ``None`` for levels without supervision.
        Returns the gradient with respect to the LR input.
        """
        n_levels = cache["levels"]
        if len(grads) != n_levels:
            raise InvalidArgumentError(f"expected {n_levels} level gradients, got {len(grads)}")
        d_feat = None  # flows from level s+1's first conv into level s's upsampled features
        d_img = None  # flows from level s+1's image upsampler into level s's output
        for s in range(n_levels, 0, -1):
            d_out = _add(grads[s - 1], d_img)
            d_img = None
            if self.config.use_residual and d_out is not None:
                d_img = self._unapply(f"level{s}.img_up", d_out, cache)
            d_up = _add(self._unapply(f"level{s}.residual", d_out, cache) if d_out is not None else None, d_feat)
            if d_up is None:
                d_feat = None
                continue
            d = self._unapply(f"level{s}.feat_up", d_up, cache)
            for i in reversed(range(self.config.depth)):
                d = self._unapply(f"level{s}.conv{i}", d, cache)
            d_feat = d
        d_x = self._unapply("input", d_feat, cache) if d_feat is not None else None
        if d_x is None:
            d_x = np.zeros_like(cache["input"][0])
        return _add(d_x, d_img)

    def _unapply(self, name, d_out, cache):
        info = self._by_name[name]
        spec = info.spec
        x, z = cache[name]
        if info.activation:
            d_out = layers.leaky_relu_backward(d_out, z, self.config.lrelu_slope)
        wp = self.params[f"{name}.weight"]
        if spec.transposed:
            d_x, d_w = layers.transposed_conv2d_backward(d_out, x, wp.value, stride=spec.stride, pad=spec.pad)
        else:
            d_x, d_w, d_b = layers.conv2d_backward(d_out, x, wp.value, stride=spec.stride, pad=spec.pad)
            self.params[f"{name}.bias"].grad += d_b
        wp.grad += d_w
        return d_x


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def build_model(config: LapSRNConfig, seed: int = 0, dtype=np.float32) -> LapSRN:
    """He-initialized convs, zero biases, bilinear image upsamplers; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    for info in layer_table(config):
        spec = info.spec
        shape = spec.weight_shape()
        if info.branch == "image":
            w = layers.bilinear_kernel(spec.kernel, spec.stride, channels=1)
        else:
            fan_in = spec.kernel ** 2 * spec.in_channels
            w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        params[f"{info.name}.weight"] = Parameter(w.astype(dtype), decay=True)
        if info.bias:
            params[f"{info.name}.bias"] = Parameter(np.zeros(spec.out_channels, dtype=dtype), decay=False)
    return LapSRN(config, params)


def super_resolve(model: LapSRN, lr_y: np.ndarray, scale: Optional[int] = None) -> list[np.ndarray]:
    """Upscale one luminance image (H, W) and return every level as clamped float64 (h, w) arrays.

    This is the single inference path shared by the ``sr`` and ``eval`` commands.
    """
    x = np.asarray(lr_y)[None, None]
    outs = model.forward(x, scale=scale)
    return [np.clip(o[0, 0].astype(np.float64), 0.0, 1.0) for o in outs]
