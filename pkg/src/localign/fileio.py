"""Binary tensor files, atomic writes, and checksums.

The on-disk tensor format is deliberately tiny: a 16-byte header (4-byte
magic ``AF32`` + three little-endian uint32 dimensions) followed by raw
little-endian float32 data in C order.  Arrays of rank below 3 pad their
trailing dimensions with 1.  Every writer in the package goes through
:func:`atomic_write_bytes` (temp file + rename) so readers never observe
partial output.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

__all__ = [
    "F32_MAGIC",
    "FileFormatError",
    "atomic_write_bytes",
    "atomic_write_json",
    "atomic_write_text",
    "read_f32",
    "sha256_bytes",
    "sha256_file",
    "write_f32",
]

F32_MAGIC = b"AF32"
_HEADER = struct.Struct("<4sIII")


class FileFormatError(ValueError):
    """A binary or manifest file does not match the expected format."""


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: Union[str, Path], payload: dict) -> None:
    """Canonical JSON (sorted keys, fixed separators) so output is stable."""
    text = json.dumps(payload, sort_keys=True, indent=2, separators=(",", ": "))
    atomic_write_text(path, text + "\n")


def write_f32(path: Union[str, Path], array: np.ndarray) -> None:
    """Serialize a 1-D/2-D/3-D float array (stored as little-endian float32)."""
    arr = np.asarray(array)
    if arr.ndim < 1 or arr.ndim > 3:
        raise FileFormatError(f"only 1-D to 3-D arrays are supported, got {arr.ndim}-D")
    dims = tuple(arr.shape) + (1,) * (3 - arr.ndim)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    atomic_write_bytes(path, _HEADER.pack(F32_MAGIC, *dims) + payload)


def read_f32(path: Union[str, Path]) -> np.ndarray:
    """Read a tensor file back as float32 with its padded 3-D shape."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FileFormatError(f"{path.name}: truncated header ({len(data)} bytes)")
    magic, d0, d1, d2 = _HEADER.unpack_from(data)
    if magic != F32_MAGIC:
        raise FileFormatError(f"{path.name}: bad magic {magic!r}")
    count = d0 * d1 * d2
    expected = _HEADER.size + 4 * count
    if len(data) != expected:
        raise FileFormatError(
            f"{path.name}: expected {expected} bytes for shape {(d0, d1, d2)}, got {len(data)}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return flat.reshape(d0, d1, d2).astype(np.float32, copy=True)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    return sha256_bytes(Path(path).read_bytes())
