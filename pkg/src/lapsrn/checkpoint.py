"""``.lpsr`` checkpoint files.

Layout::

    b"LPSR" | version byte 0x01 | header length (uint64 LE) | UTF-8 JSON header | float32 LE tensor data

The header holds ``{"config": {...}, "manifest": [{"name", "shape"}, ...]}``;
tensors follow in manifest order.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import LapSRN, LapSRNConfig
from .tensor import Parameter

MAGIC = b"LPSR"
VERSION = 1
_DTYPE = np.dtype("<f4")


def to_bytes(model: LapSRN) -> bytes:
    manifest = [{"name": k, "shape": list(p.value.shape)} for k, p in model.params.items()]
    header = json.dumps({"config": model.config.to_dict(), "manifest": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, bytes([VERSION]), struct.pack("<Q", len(header)), header]
    for p in model.params.values():
        chunks.append(np.ascontiguousarray(p.value, dtype=_DTYPE).tobytes())
    return b"".join(chunks)


def save_checkpoint(model: LapSRN, path) -> Path:
    """Write atomically (temp file + rename) so a failed write never leaves a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    os.replace(tmp, path)
    return path


def from_bytes(blob: bytes) -> LapSRN:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CheckpointFormatError("not an .lpsr checkpoint (bad magic bytes)")
    if len(blob) < 13:
        raise CheckpointTruncatedError("checkpoint ends inside the fixed preamble")
    if blob[4] != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {blob[4]}, expected {VERSION}")
    (hlen,) = struct.unpack_from("<Q", blob, 5)
    start = 13
    if len(blob) < start + hlen:
        raise CheckpointTruncatedError("checkpoint ends inside the JSON header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
        config = LapSRNConfig.from_dict(header["config"])
        manifest = header["manifest"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint header: {exc}") from exc

    expected = LapSRN.param_shapes(config)
    names = [entry["name"] for entry in manifest]
    if names != list(expected):
        raise CheckpointShapeError("checkpoint manifest does not match the layer table of its config")
    offset = start + hlen
    params = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        if shape != tuple(expected[entry["name"]]):
            raise CheckpointShapeError(
                f"{entry['name']}: stored shape {shape}, config requires {expected[entry['name']]}")
        nbytes = int(np.prod(shape)) * _DTYPE.itemsize
        if len(blob) < offset + nbytes:
            raise CheckpointTruncatedError(f"checkpoint ends inside tensor {entry['name']}")
        value = np.frombuffer(blob, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize, offset=offset)
        params[entry["name"]] = Parameter(value.reshape(shape).astype(np.float32),
                                          decay=not entry["name"].endswith(".bias"))
        offset += nbytes
    if offset != len(blob):
        raise CheckpointFormatError(f"{len(blob) - offset} trailing bytes after the last tensor")
    return LapSRN(config, params)


def load_checkpoint(path) -> LapSRN:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob)
