"""Flat binary tensor files with a fixed header and a JSON sidecar.

Layout (little endian)::

    4 bytes   magic  b"VFT1"
    1 byte    dtype code (see DTYPES)
    3 bytes   padding
    4 x int64 dims
    ...       raw C-order data

The sidecar ``<file>.json`` holds free-form metadata (codec config, seed).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VFT1"
DTYPES = {0: np.float32, 1: np.float64, 2: np.float16, 3: np.uint8}
_CODES = {np.dtype(v): k for k, v in DTYPES.items()}
_HEADER = struct.Struct("<4sB3x4q")


class TensorFileError(ValueError):
    pass


def write_tensor(path: str | Path, array: np.ndarray, meta: dict | None = None) -> Path:
    path = Path(path)
    array = np.ascontiguousarray(array)
    if array.ndim != 4:
        raise TensorFileError(f"tensor files hold 4-d arrays, got shape {array.shape}")
    code = _CODES.get(array.dtype)
    if code is None:
        raise TensorFileError(f"unsupported dtype {array.dtype}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, code, *array.shape))
        fh.write(array.tobytes())
    if meta is not None:
        sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFileError(f"{path}: truncated header")
    magic, code, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFileError(f"{path}: bad magic {magic!r}")
    if code not in DTYPES:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    dtype = np.dtype(DTYPES[code])
    expected = int(np.prod(dims)) * dtype.itemsize
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise TensorFileError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(dims).copy()


def read_meta(path: str | Path) -> dict:
    return json.loads(sidecar(Path(path)).read_text())


def sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")
