"""Deeply supervised training: multi-scale loss, SGD with momentum, step schedule."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import layers
from .checkpoint import save_checkpoint
from .data import sample_batch
from .errors import InvalidArgumentError, NumericError
from .model import LapSRN
from .tensor import Parameter

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "iter", "loss", "lr", "wall_ms")


@dataclass
class TrainConfig:
    lr_init: float = 1e-5
    lr_gamma: float = 0.5
    lr_step_epochs: int = 50
    lr_floor: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iters_per_epoch: int = 1000
    batch_n: int = 64
    patch_size: int = 128
    augment: bool = True
    max_epochs: int = 200
    grad_clip: Optional[float] = None
    loss_reduction: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if not self.lr_init > self.lr_floor > 0:
            raise InvalidArgumentError(
                f"lr_init/lr_floor: need lr_init > lr_floor > 0, got {self.lr_init}, {self.lr_floor}")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError(f"momentum: must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidArgumentError(f"weight_decay: must be >= 0, got {self.weight_decay}")
        for name in ("lr_step_epochs", "iters_per_epoch", "batch_n", "patch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.loss_reduction not in ("mean", "sum"):
            raise InvalidArgumentError(f"loss_reduction: must be 'mean' or 'sum', got {self.loss_reduction!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise InvalidArgumentError(f"grad_clip: must be > 0 when set, got {self.grad_clip}")


@dataclass
class TrainLogRecord:
    epoch: int
    iter: int
    loss: float
    lr: float
    wall_ms: float


# ---------------------------------------------------------------- objective

def multiscale_loss(outputs: Sequence[np.ndarray], targets: Sequence[np.ndarray], loss_kind: str = "charbonnier",
                    eps: float = layers.CHARBONNIER_EPS, reduction: str = "mean"):
    """Sum over pyramid levels of the per-level loss; returns ``(loss, per-level gradients)``."""
    if len(outputs) != len(targets):
        raise InvalidArgumentError(f"{len(outputs)} outputs but {len(targets)} target levels")
    total = 0.0
    grads = []
    for out, tgt in zip(outputs, targets):
        if loss_kind == "charbonnier":
            value, g = layers.charbonnier_loss(out, tgt, eps, reduction)
        elif loss_kind == "l2":
            value, g = layers.l2_loss(out, tgt, reduction)
        else:
            raise InvalidArgumentError(f"unknown loss kind {loss_kind!r}")
        total += value
        grads.append(g)
    return total, grads


# ---------------------------------------------------------------- schedule / optimizer

def unfloored_lr(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr_init * cfg.lr_gamma ** (epoch // cfg.lr_step_epochs)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: multiply by ``lr_gamma`` every ``lr_step_epochs``, never below ``lr_floor``."""
    if epoch < 0:
        raise InvalidArgumentError(f"epoch must be >= 0, got {epoch}")
    return max(cfg.lr_floor, unfloored_lr(epoch, cfg))


def schedule_finished(epoch: int, cfg: TrainConfig) -> bool:
    return unfloored_lr(epoch, cfg) < cfg.lr_floor or epoch >= cfg.max_epochs


def sgd_step(params: dict[str, Parameter], cfg: TrainConfig, lr: float) -> None:
    """Momentum SGD with L2 weight decay on weights (not biases); zeroes grads afterwards."""
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name}")
    if cfg.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))
        if norm > cfg.grad_clip:
            for p in params.values():
                p.grad *= p.grad.dtype.type(cfg.grad_clip / norm)
    for p in params.values():
        g = p.grad
        if p.decay and cfg.weight_decay:
            g = g + p.value.dtype.type(cfg.weight_decay) * p.value
        p.momentum *= p.value.dtype.type(cfg.momentum)
        p.momentum += g
        p.value -= p.value.dtype.type(lr) * p.momentum
        p.zero_grad()


# ---------------------------------------------------------------- loop

def train_step(model: LapSRN, lr_batch: np.ndarray, targets: Sequence[np.ndarray], cfg: TrainConfig, lr: float) -> float:
    """One forward / loss / backward / update; returns the loss before the update."""
    mc = model.config
    cache: dict = {}
    outputs = model.forward(lr_batch, cache=cache)
    # the single-step variant only supervises the final scale
    tgts = list(targets) if mc.use_pyramid else [targets[-1]]
    loss, grads = multiscale_loss(outputs, tgts, mc.loss_kind, mc.charbonnier_eps, cfg.loss_reduction)
    if not math.isfinite(loss):
        raise NumericError(f"loss became non-finite ({loss})")
    model.zero_grad()
    model.backward(cache, grads)
    sgd_step(model.params, cfg, lr)
    return loss


class CSVLog:
    """Append-only ``epoch,iter,loss,lr,wall_ms`` training log."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = self.path.open("a", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._writer.writerow(LOG_FIELDS)

    def __call__(self, rec: TrainLogRecord):
        self._writer.writerow([rec.epoch, rec.iter, repr(rec.loss), repr(rec.lr), f"{rec.wall_ms:.3f}"])

    def close(self):
        self._fh.flush()
        self._fh.close()


def train(model: LapSRN, corpus: Sequence[np.ndarray], cfg: TrainConfig, out_dir=None,
          callbacks: Iterable[Callable[[TrainLogRecord], None]] = (), max_epochs: Optional[int] = None,
          log_wall_time: bool = True):
    """Run epochs of ``iters_per_epoch`` iterations until the schedule bottoms out.

    With ``out_dir`` set, writes ``train.csv`` and ``epoch_%04d.lpsr`` after every
    epoch, and ``interrupt.lpsr`` on Ctrl-C.  Returns ``(model, log_records)``.
    Set ``log_wall_time=False`` for a byte-reproducible log.
    """
    if not corpus:
        raise InvalidArgumentError("empty training corpus")
    rng = np.random.default_rng(cfg.seed)
    callbacks = list(callbacks)
    csv_log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_log = CSVLog(out_dir / "train.csv")
        callbacks.insert(0, csv_log)  # log first so an interrupt from a later callback keeps the row
    limit = cfg.max_epochs if max_epochs is None else max_epochs
    records: list[TrainLogRecord] = []
    epoch = 0
    try:
        while epoch < limit and not schedule_finished(epoch, cfg):
            lr = lr_schedule(epoch, cfg)
            for it in range(cfg.iters_per_epoch):
                t0 = time.perf_counter()
                batch = sample_batch(corpus, rng, n=cfg.batch_n, patch=cfg.patch_size,
                                     scale=model.config.scale, use_augment=cfg.augment, dtype=model.dtype)
                loss = train_step(model, batch.lr, batch.targets, cfg, lr)
                wall = (time.perf_counter() - t0) * 1e3 if log_wall_time else 0.0
                rec = TrainLogRecord(epoch, it, loss, lr, wall)
                records.append(rec)
                for cb in callbacks:
                    cb(rec)
            log.info("epoch %d done: lr %.3g, last loss %.6g", epoch, lr, records[-1].loss)
            if out_dir is not None:
                save_checkpoint(model, out_dir / f"epoch_{epoch:04d}.lpsr")
            epoch += 1
    except KeyboardInterrupt:
        if out_dir is not None:
            save_checkpoint(model, out_dir / "interrupt.lpsr")
        raise
    finally:
        if csv_log is not None:
            csv_log.close()
    return model, records


# ---------------------------------------------------------------- config files

def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, default):
    low = value.lower()
    if low in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InvalidArgumentError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if default is None:
        # untyped optional fields: try int, then float
        for cast in (int, float):
            try:
                return cast(value)
            except ValueError:
                pass
    return value


def split_config(values: dict[str, str], *classes) -> list[dict]:
    """Route each key to the dataclass that owns it, coercing to the default's type."""
    owned = [dict() for _ in classes]
    for key, raw in values.items():
        for i, cls in enumerate(classes):
            f = {f.name: f for f in fields(cls)}.get(key)
            if f is not None:
                try:
                    owned[i][key] = _coerce(raw, cls.__dataclass_fields__[key].default)
                except ValueError as exc:
                    raise InvalidArgumentError(f"{key}: {exc}") from exc
                break
        else:
            raise InvalidArgumentError(f"unknown config key {key!r}")
    return owned
