"""Finite-difference verification of every hand-written backward pass.

Each check projects a layer's output onto a fixed random tensor G, so the
scalar ``sum(layer(x) * G)`` has gradient ``backward(G)``, and compares that
against central differences in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers, tensor
from .model import LapSRNConfig, build_model

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool
    skipped: int = 0  # coordinates excluded because the stencil crossed a kink


def _check(name, analytic, f, x, tol, h):
    err = tensor.relative_error(analytic, tensor.finite_difference_grad(f, x, h))
    return CheckResult(name, err, err < tol)


def _layer_checks(rng, tol, h):
    u = lambda *shape: rng.uniform(-1.0, 1.0, shape)  # noqa: E731
    out = []

    a, b = u(1, 2, 3, 3), u(1, 2, 3, 3)
    g = u(1, 2, 3, 3)
    da, db = tensor.elementwise_add_backward(g)
    out.append(_check("elementwise_add/a", da, lambda v: np.sum(tensor.elementwise_add(v, b) * g), a, tol, h))
    out.append(_check("elementwise_add/b", db, lambda v: np.sum(tensor.elementwise_add(a, v) * g), b, tol, h))

    for stride, pad, size in ((1, 1, 5), (2, 1, 5)):
        x, w, bias = u(2, 2, size, size), u(3, 2, 3, 3), u(3)
        y = layers.conv2d(x, w, bias, stride=stride, pad=pad)
        g = u(*y.shape)
        dx, dw, dbias = layers.conv2d_backward(g, x, w, stride=stride, pad=pad)
        tag = f"conv2d[s{stride}]"
        out.append(_check(f"{tag}/input", dx, lambda v: np.sum(layers.conv2d(v, w, bias, stride=stride, pad=pad) * g), x, tol, h))
        out.append(_check(f"{tag}/weight", dw, lambda v: np.sum(layers.conv2d(x, v, bias, stride=stride, pad=pad) * g), w, tol, h))
        out.append(_check(f"{tag}/bias", dbias, lambda v: np.sum(layers.conv2d(x, w, v, stride=stride, pad=pad) * g), bias, tol, h))

    for k, stride, pad in ((4, 2, 1), (8, 4, 2)):
        x, w = u(1, 2, 3, 3), u(2, 3, k, k)
        y = layers.transposed_conv2d(x, w, stride=stride, pad=pad)
        g = u(*y.shape)
        dx, dw = layers.transposed_conv2d_backward(g, x, w, stride=stride, pad=pad)
        tag = f"transposed_conv2d[k{k}s{stride}]"
        out.append(_check(f"{tag}/input", dx,
                          lambda v: np.sum(layers.transposed_conv2d(v, w, stride=stride, pad=pad) * g), x, tol, h))
        out.append(_check(f"{tag}/weight", dw,
                          lambda v: np.sum(layers.transposed_conv2d(x, v, stride=stride, pad=pad) * g), w, tol, h))

    x = u(2, 3, 4, 4)
    g = u(2, 3, 4, 4)
    out.append(_check("leaky_relu", layers.leaky_relu_backward(g, x, 0.2),
                      lambda v: np.sum(layers.leaky_relu(v, 0.2) * g), x, tol, h))

    pred, target = u(1, 1, 4, 4), u(1, 1, 4, 4)
    _, gc = layers.charbonnier_loss(pred, target)
    out.append(_check("charbonnier_loss", gc, lambda v: layers.charbonnier_loss(v, target)[0], pred, tol, h))
    _, gl = layers.l2_loss(pred, target)
    out.append(_check("l2_loss", gl, lambda v: layers.l2_loss(v, target)[0], pred, tol, h))
    return out


def _kink_signature(model, cache) -> bytes:
    """Sign pattern of every leaky-ReLU input; it changes iff a kink was crossed."""
    return b"".join(np.signbit(cache[info.name][1]).tobytes()
                    for info in model.layers if info.activation and info.name in cache)


def _fd_skipping_kinks(f, x, h):
    """Central differences like ``tensor.finite_difference_grad``, plus a mask of
    coordinates whose +-h stencil straddles a leaky-ReLU kink (no derivative there).

    ``f`` returns ``(value, kink_signature)``.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.zeros(flat.size)
    straddles = np.zeros(flat.size, dtype=bool)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp, sp = f(x)
        flat[i] = orig - h
        fm, sm = f(x)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
        straddles[i] = sp != sm
    return grad.reshape(x.shape), straddles.reshape(x.shape)


def _check_skipping_kinks(name, analytic, f, x, tol, h, max_skip=0.05):
    numeric, straddles = _fd_skipping_kinks(f, x, h)
    keep = ~straddles
    err = tensor.relative_error(analytic[keep], numeric[keep])
    passed = err < tol and straddles.sum() <= max(1, int(max_skip * straddles.size))
    return CheckResult(name, err, passed, skipped=int(straddles.sum()))


def model_checks(config: LapSRNConfig, seed: int, tol=TOLERANCE, h=STEP, input_size=6, label=None):
    """End-to-end check of the summed per-level loss against every input and parameter coordinate."""
    from .trainer import multiscale_loss

    rng = np.random.default_rng(seed)
    model = build_model(config, seed=seed, dtype=np.float64)
    x = rng.uniform(0.0, 1.0, (1, 1, input_size, input_size))
    # Keep every residual >= 0.1 away from zero: near zero the Charbonnier
    # third derivative is ~1/eps^2 and central differences stop being accurate.
    targets = []
    for out in model.forward(x):
        offset = rng.uniform(0.1, 0.5, out.shape) * rng.choice([-1.0, 1.0], out.shape)
        targets.append(out + offset)

    def penalty(out, tgt):
        d = out - tgt
        if config.loss_kind == "l2":
            return d * d
        return np.sqrt(d * d + config.charbonnier_eps ** 2)

    # Same gradient as the training loss, but each pixel's baseline penalty is
    # subtracted before averaging so the differenced values sit near zero and
    # float64 rounding stays far below the smallest partials being checked.
    baseline = [penalty(o, t) for o, t in zip(model.forward(x), targets)]

    def loss_of(inp):
        c: dict = {}
        outs = model.forward(inp, cache=c)
        value = sum(np.mean(penalty(o, t) - b) for o, t, b in zip(outs, targets, baseline))
        return value, _kink_signature(model, c)

    cache: dict = {}
    outputs = model.forward(x, cache=cache)
    _, grads = multiscale_loss(outputs, targets, config.loss_kind, config.charbonnier_eps)
    model.zero_grad()
    d_x = model.backward(cache, grads)

    label = label or f"model[x{config.scale},d{config.depth}]"
    results = [_check_skipping_kinks(f"{label}/input", d_x, loss_of, x, tol, h)]
    for name, p in model.params.items():
        original = p.value

        def loss_with(v, p=p):
            p.value = v
            try:
                return loss_of(x)
            finally:
                p.value = original

        results.append(_check_skipping_kinks(f"{label}/{name}", p.grad, loss_with, original, tol, h))
    return results


def run_gradcheck(seed: int = 0, tol: float = TOLERANCE, h: float = STEP) -> list[CheckResult]:
    """Every layer, then small end-to-end models covering all architecture variants."""
    rng = np.random.default_rng(seed)
    results = _layer_checks(rng, tol, h)
    variants = [
        (LapSRNConfig(scale=2, depth=2, channels=4), "model[x2,d2]"),
        (LapSRNConfig(scale=4, depth=1, channels=3), "model[x4,d1]"),
        (LapSRNConfig(scale=4, depth=1, channels=3, loss_kind="l2"), "model[x4,d1,l2]"),
        (LapSRNConfig(scale=4, depth=1, channels=3, use_residual=False), "model[x4,d1,no-residual]"),
        (LapSRNConfig(scale=4, depth=1, channels=3, use_pyramid=False), "model[x4,d1,no-pyramid]"),
    ]
    for cfg, label in variants:
        results.extend(model_checks(cfg, seed, tol, h, input_size=6 if cfg.scale == 2 else 4, label=label))
    return results
