"""Binary PGM (P5) reading and writing.

Images travel through the pipeline as float32 arrays in [0, 1]; on disk
they are 8-bit P5 with maxval 255. Quantization rounds half-up so the
same float image always produces the same bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmError(ValueError):
    pass


def encode_pgm(image: np.ndarray) -> bytes:
    """Quantize a float image in [0,1] (any 2-D shape) to P5 bytes."""
    if image.ndim != 2:
        raise PgmError(f"expected a 2-D image, got shape {image.shape}")
    q = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse P5 bytes into a float32 image in [0,1]."""
    tokens = []
    pos = 0
    # header is exactly three tokens after the magic: width, height, maxval
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            eol = data.find(b"\n", pos)
            pos = len(data) if eol < 0 else eol + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise PgmError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise PgmError(f"malformed PGM header: {exc}") from None
    if not (0 < maxval < 256):
        raise PgmError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise PgmError("truncated PGM raster")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return (pixels.astype(np.float32) / np.float32(maxval)).astype(np.float32)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def read_pgm(path: str | Path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())
