"""``lapsrn`` command line: train, sr, eval, downsample, gradcheck, info.

Exit codes: 0 ok, 1 check failure, 2 usage or invalid configuration,
3 data error (unreadable images or checkpoints), 4 numeric abort.

Every command accepts ``--config FILE`` with ``key = value`` lines whose keys
are the long flag names with dashes turned into underscores (``lr_init``,
``batch_n``...).  Switch flags map onto the setting they flip, so
``--no-residual`` is ``use_residual = false``.  Flags given on the command line
override the file.  ``LAPSR_THREADS`` caps BLAS worker threads.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import __version__
from .checkpoint import load_checkpoint
from .data import (
    bicubic_resize,
    crop_to_multiple,
    list_images,
    load_corpus,
    load_image,
    read_manifest,
    rgb_to_ycbcr,
    save_image,
    ycbcr_to_rgb,
)
from .errors import CapabilityError, CheckpointError, DataError, InvalidArgumentError, NumericError
from .gradcheck import STEP, TOLERANCE, run_gradcheck
from .metrics import evaluate_dataset
from .model import SCALES, LapSRNConfig, build_model, count_layers, super_resolve
from .trainer import TrainConfig, parse_config_text, train

log = logging.getLogger("lapsrn")

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


class UsageError(Exception):
    """Bad command-line or config-file input detected after argparse."""


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so ``main`` can return a code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- parser

def _add_config(p):
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    p.add_argument("--config", type=Path, metavar="FILE", help="key = value file; command-line flags win")


def _train_parser(sub):
    p = sub.add_parser("train", help="train a model on a directory of HR images")
    _add_config(p)
    p.add_argument("--data", type=Path, help="directory of HR training images (PNG/BMP)")
    p.add_argument("--out", type=Path, help="directory for train.csv and epoch_NNNN.lpsr")
    m = p.add_argument_group("model")
    m.add_argument("--scale", type=int, choices=SCALES)
    m.add_argument("--depth", type=int, help="conv layers per level (default 10, or 5 at 8x)")
    m.add_argument("--channels", type=int)
    m.add_argument("--loss", dest="loss_kind", choices=("charbonnier", "l2"))
    m.add_argument("--charbonnier-eps", type=float)
    m.add_argument("--lrelu-slope", type=float)
    m.add_argument("--no-residual", dest="use_residual", action="store_false", default=None,
                   help="predict the HR image directly instead of a residual")
    m.add_argument("--no-pyramid", dest="use_pyramid", action="store_false", default=None,
                   help="one upsampling step to the final scale, supervised at that scale only")
    o = p.add_argument_group("optimization")
    o.add_argument("--seed", type=int, help="seeds both initialization and batch sampling")
    o.add_argument("--lr-init", type=float)
    o.add_argument("--lr-gamma", type=float)
    o.add_argument("--lr-step-epochs", type=int)
    o.add_argument("--lr-floor", type=float)
    o.add_argument("--momentum", type=float)
    o.add_argument("--weight-decay", type=float)
    o.add_argument("--iters-per-epoch", type=int)
    o.add_argument("--batch-n", type=int)
    o.add_argument("--patch-size", type=int)
    o.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    o.add_argument("--max-epochs", type=int)
    o.add_argument("--grad-clip", type=float)
    o.add_argument("--loss-reduction", choices=("mean", "sum"))
    o.add_argument("--no-wall-time", dest="log_wall_time", action="store_false", default=None,
                   help="write 0 in the wall_ms column so logs are byte-reproducible")
    p.set_defaults(handler=cmd_train)


def _sr_parser(sub):
    p = sub.add_parser("sr", help="super-resolve an image or every image in a directory")
    _add_config(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--input", type=Path, help="PNG/BMP file or directory of them")
    p.add_argument("--output", type=Path, help="output directory")
    p.add_argument("--scale", type=int, help="default: the model's own scale")
    p.add_argument("--all-scales", action="store_true", default=None,
                   help="write every pyramid level up to --scale, suffixed _x2, _x4, _x8")
    p.set_defaults(handler=cmd_sr)


def _eval_parser(sub):
    p = sub.add_parser("eval", help="PSNR/SSIM of a model or bicubic on a manifest of HR images")
    _add_config(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--model", type=Path)
    src.add_argument("--baseline", choices=("bicubic",))
    p.add_argument("--manifest", type=Path, help="text file listing HR image paths, one per line")
    p.add_argument("--scale", type=int)
    p.add_argument("--shave", type=int, help="border pixels excluded from the metrics (default: scale)")
    p.add_argument("--json", action="store_true", default=None, help="JSON instead of CSV")
    p.add_argument("--output", type=Path, help="write results here instead of stdout")
    p.add_argument("--strict", action="store_true", default=None, help="exit 3 if any listed image is missing")
    p.set_defaults(handler=cmd_eval)


def _downsample_parser(sub):
    p = sub.add_parser("downsample", help="bicubic 1/scale copies of HR images")
    _add_config(p)
    p.add_argument("--input", type=Path, help="PNG/BMP file or directory of them")
    p.add_argument("--output", type=Path, help="output directory")
    p.add_argument("--scale", type=int)
    p.set_defaults(handler=cmd_downsample)


def _gradcheck_parser(sub):
    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _add_config(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, help=f"max relative error (default {TOLERANCE:g})")
    p.add_argument("--step", type=float, help=f"central-difference step (default {STEP:g})")
    p.set_defaults(handler=cmd_gradcheck)


def _info_parser(sub):
    p = sub.add_parser("info", help="version, thread pools, and layer counts or a checkpoint summary")
    _add_config(p)
    p.add_argument("--model", type=Path, help="describe this checkpoint")
    p.set_defaults(handler=cmd_info)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lapsrn", description="Laplacian pyramid super-resolution network.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for add in (_train_parser, _sr_parser, _eval_parser, _downsample_parser, _gradcheck_parser, _info_parser):
        add(sub)
    return parser


# ---------------------------------------------------------------- config files

def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _config_value(action, raw: str):
    if action.nargs == 0:  # store_true / store_false switches
        low = raw.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise UsageError(f"config key {action.dest!r}: expected a boolean, got {raw!r}")
    try:
        value = action.type(raw) if action.type else raw
    except ValueError as exc:
        raise UsageError(f"config key {action.dest!r}: {exc}") from exc
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"config key {action.dest!r}: {value!r} is not one of {list(action.choices)}")
    return value


def apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Fill every setting not given on the command line from ``args.config``."""
    if getattr(args, "config", None) is None:
        return args
    try:
        text = args.config.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
    try:
        values = parse_config_text(text)
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from exc
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "verbose", "handler")}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for '{args.command}'")
        if getattr(args, key, None) is None:  # every flag defaults to None, so None means "not given"
            setattr(args, key, _config_value(action, raw))
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command}: missing required setting(s) {flags}")


# ---------------------------------------------------------------- commands

def _pick(args, cls) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(cls)
            if getattr(args, f.name, None) is not None}


def cmd_train(args) -> int:
    _require(args, "data", "out")
    model_cfg = LapSRNConfig(**_pick(args, LapSRNConfig))
    train_cfg = TrainConfig(**_pick(args, TrainConfig))
    corpus = load_corpus(args.data)
    model = build_model(model_cfg, seed=train_cfg.seed)
    log.info("training %d-layer %dx model (%d parameters) on %d images",
             count_layers(model_cfg), model_cfg.scale, model.num_parameters(), len(corpus))
    train(model, corpus, train_cfg, out_dir=args.out,
          log_wall_time=args.log_wall_time is not False)
    return EXIT_OK


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        paths = list_images(path)
        if not paths:
            raise DataError(f"no PNG/BMP images in {path}")
        return paths
    if not path.exists():
        raise DataError(f"{path} does not exist")
    return [path]


def upscale_image(model, img: np.ndarray, scale: Optional[int] = None) -> list[np.ndarray]:
    """Every pyramid level of ``img`` up to ``scale``; color goes Y through the model, CbCr bicubic."""
    if img.ndim == 2:
        return super_resolve(model, img, scale)
    ycc = rgb_to_ycbcr(img)
    outs = []
    for y in super_resolve(model, ycc[..., 0], scale):
        h, w = y.shape
        cbcr = bicubic_resize(ycc[..., 1:], h, w)
        outs.append(ycbcr_to_rgb(np.concatenate([y[..., None], cbcr], axis=2)))
    return outs


def cmd_sr(args) -> int:
    _require(args, "model", "input", "output")
    model = load_checkpoint(args.model)
    scale = args.scale or model.config.scale
    model.levels_for_scale(scale)  # capability check before touching any file
    paths = _inputs(args.input)
    args.output.mkdir(parents=True, exist_ok=True)
    for path in paths:
        levels = upscale_image(model, load_image(path), scale)
        if args.all_scales:
            factors = [model.config.scale] if not model.config.use_pyramid else [2 ** (i + 1) for i in range(len(levels))]
            pairs = list(zip(factors, levels))
        else:
            pairs = [(scale, levels[-1])]
        for factor, img in pairs:
            dst = args.output / f"{path.stem}_x{factor}{path.suffix.lower()}"
            save_image(img, dst)
            log.info("wrote %s (%dx%d)", dst, img.shape[1], img.shape[0])
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "manifest")
    if args.model is None and args.baseline is None:
        raise UsageError("eval: give --model or --baseline bicubic")
    images = read_manifest(args.manifest)
    if not images:
        raise UsageError(f"manifest {args.manifest} lists no images")
    if args.model is not None:
        model = load_checkpoint(args.model)
        scale = args.scale or model.config.scale
        model.levels_for_scale(scale)
        upscaler = model
    else:
        _require(args, "scale")
        if args.scale < 2 or args.scale & (args.scale - 1):
            raise UsageError(f"--scale must be a power of two >= 2, got {args.scale}")
        scale, upscaler = args.scale, "bicubic"
    if args.shave is not None and args.shave < 0:
        raise UsageError(f"--shave must be >= 0, got {args.shave}")
    result = evaluate_dataset(upscaler, images, scale, shave_px=args.shave)
    if result.skipped and args.strict:
        raise DataError(f"{len(result.skipped)} listed image(s) could not be read: {', '.join(result.skipped)}")
    if not result.records:
        raise DataError("none of the listed images could be read")
    text = result.to_json() + "\n" if args.json else result.to_csv()
    if args.output is not None:
        args.output.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_downsample(args) -> int:
    _require(args, "input", "output", "scale")
    if args.scale < 2:
        raise UsageError(f"--scale must be >= 2, got {args.scale}")
    paths = _inputs(args.input)
    args.output.mkdir(parents=True, exist_ok=True)
    for path in paths:
        hr = crop_to_multiple(load_image(path), args.scale)
        h, w = hr.shape[:2]
        if h == 0 or w == 0:
            raise DataError(f"{path} is smaller than the scale factor {args.scale}")
        save_image(bicubic_resize(hr, h // args.scale, w // args.scale), args.output / path.name)
    log.info("downsampled %d image(s) by %dx into %s", len(paths), args.scale, args.output)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed or 0, tol=args.tol or TOLERANCE, h=args.step or STEP)
    failed = [r for r in results if not r.passed]
    for r in results:
        note = f" ({r.skipped} kink-straddling coordinates skipped)" if r.skipped else ""
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name}: max rel error {r.max_rel_error:.3e}{note}")
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed:", file=sys.stderr)
        for r in failed:
            print(f"  {r.name}: max rel error {r.max_rel_error:.3e}", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_info(args) -> int:
    print(f"lapsrn {__version__}, numpy {np.__version__}")
    for pool in threadpool_info():
        print(f"threadpool {pool.get('internal_api')}: {pool.get('num_threads')} threads")
    if args.model is not None:
        model = load_checkpoint(args.model)
        cfg = model.config
        print(f"checkpoint {args.model}: {cfg.to_dict()}")
        print(f"layers {count_layers(cfg)}, parameters {model.num_parameters()}")
        for info in model.layers:
            print(f"  {info.name:<18} {info.branch:<9} {info.spec.weight_shape()}")
        return EXIT_OK
    for scale in SCALES:
        cfg = LapSRNConfig(scale=scale)
        print(f"{scale}x default model: depth {cfg.depth}, {count_layers(cfg)} layers, "
              f"{build_model(cfg).num_parameters()} parameters")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def _thread_limit() -> Optional[int]:
    raw = os.environ.get("LAPSR_THREADS")
    if raw is None or raw.strip() == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LAPSR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"LAPSR_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = apply_config_file(args, parser)
        threads = _thread_limit()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=threads):
            return args.handler(args)
    except (UsageError, InvalidArgumentError, CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
