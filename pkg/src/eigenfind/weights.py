"""Versioned binary container for named float32 tensors.

Layout (all integers little-endian u32): magic "LCF1", version, tensor
count, then per tensor: name length, UTF-8 name, rank, dims, raw
little-endian float32 payload. Tensors are written sorted by name so the
same bundle always produces the same bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LCF1"
VERSION = 1


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class TruncatedError(WeightFileError):
    pass


def save_weights(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    return b"".join(chunks)


def load_weights(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedError(f"truncated while reading {what}")
        out = view[pos : pos + n]
        pos += n
        return out

    magic = bytes(take(4, "magic"))
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise VersionError(f"unsupported version {version}, expected {VERSION}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * n_items, f"payload of {name}")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        tensors[name] = arr
    if pos != len(view):
        raise WeightFileError(f"{len(view) - pos} trailing bytes after last tensor")
    return tensors


def write_weights(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(save_weights(tensors))


def read_weights(path: str | Path) -> dict[str, np.ndarray]:
    return load_weights(Path(path).read_bytes())
