"""GVCK checkpoint files.

Layout::

    b"GVCK1\\n"
    {"config": {...}, "tensors": [{"name": ..., "shape": [...], "offset": ...}, ...]}\\n
    little-endian float32 payloads; ``offset`` is in bytes from the end of the header line
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import BadMagicError, FormatError, ShapeMismatchError, TruncatedError, VersionError
from .model import ModelConfig, param_shapes

MAGIC_PREFIX = b"GVCK"
VERSION = 1
MAGIC = b"GVCK1\n"


def save_checkpoint(params: Mapping[str, np.ndarray], config: ModelConfig, path) -> None:
    names = list(param_shapes(config))
    if set(names) != set(params):
        raise ShapeMismatchError("parameter names do not match the config's census")
    tensors, blobs, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config.to_dict(), "tensors": tensors}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def read_header(raw: bytes, path="<bytes>") -> Tuple[dict, int]:
    if not raw.startswith(MAGIC_PREFIX):
        raise BadMagicError(f"{path}: not a GVCK checkpoint")
    line_end = raw.find(b"\n")
    if line_end < 0 or line_end > 16:
        raise BadMagicError(f"{path}: malformed magic line")
    version = raw[len(MAGIC_PREFIX):line_end]
    if version != str(VERSION).encode():
        raise VersionError(f"{path}: checkpoint version {version!r}, this build reads {VERSION}")
    hdr_end = raw.find(b"\n", line_end + 1)
    if hdr_end < 0:
        raise TruncatedError(f"{path}: header line is not terminated")
    try:
        header = json.loads(raw[line_end + 1:hdr_end].decode("utf-8"))
        header["config"], header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    return header, hdr_end + 1


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], ModelConfig]:
    raw = Path(path).read_bytes()
    header, start = read_header(raw, path)
    config = ModelConfig.from_dict(header["config"])
    expected = param_shapes(config)
    stored = {t["name"]: t for t in header["tensors"]}
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise ShapeMismatchError(
            f"{path}: tensor set contradicts config (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    payload = memoryview(raw)[start:]
    params = {}
    for name, shape in expected.items():
        entry = stored[name]
        if tuple(entry["shape"]) != shape:
            raise ShapeMismatchError(
                f"{path}: tensor {name!r} stored with shape {tuple(entry['shape'])}, "
                f"config implies {shape}"
            )
        n = int(np.prod(shape, dtype=np.int64)) * 4
        off = int(entry["offset"])
        if off < 0 or off + n > len(payload):
            raise TruncatedError(
                f"{path}: tensor {name!r} needs bytes [{off}, {off + n}) but payload has {len(payload)}"
            )
        params[name] = np.frombuffer(payload[off:off + n], dtype="<f4").astype(np.float32).reshape(shape)
    return params, config
