"""Binary tensor and checkpoint files.

Single tensor ("BTSR"): magic, u32 rank, u64 dims..., then raw
little-endian float64 data in row-major order. Dataset image files and
checkpoint entries both use this layout.

Checkpoint container ("BTSC"): magic, u32 version, u64 metadata length,
UTF-8 JSON metadata, u32 entry count, then per entry a u16 name length,
the UTF-8 name, and a BTSR blob. Metadata carries the config snapshot,
epoch and RNG state; entries carry the named parameter tensors.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"BTSR"
CHECKPOINT_MAGIC = b"BTSC"
CHECKPOINT_VERSION = 1


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float64)
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        stream.write(struct.pack("<Q", dim))
    stream.write(arr.astype("<f8").tobytes())


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r} (expected {TENSOR_MAGIC!r})")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    shape = tuple(struct.unpack("<Q", _read_exact(stream, 8))[0] for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = _read_exact(stream, count * 8)
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            write_tensor(fh, tensors[name])


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} (expected {CHECKPOINT_MAGIC!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            tensors[name] = read_tensor(fh)
    return tensors, meta


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise ValueError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data
