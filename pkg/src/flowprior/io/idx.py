"""Reader for the IDX format used by the classic digit datasets."""

from __future__ import annotations

import struct

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxParseError(ValueError):
    pass


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IdxParseError(
            f"truncated IDX file at byte {offset}: expected {n} bytes for "
            f"{what}, got {len(data)}")
    return data


def read_idx(path):
    """Images (magic 0x803) -> float array (N,1,H,W) in [0,255];
    labels (magic 0x801) -> int array (N,)."""
    with open(path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, 0, "magic"))[0]
        if magic == IMAGE_MAGIC:
            n, h, w = struct.unpack(">III", _read_exact(f, 12, 4, "dimensions"))
            payload = f.read()
            expected = n * h * w
            if len(payload) != expected:
                raise IdxParseError(
                    f"truncated IDX payload at byte 16: expected {expected} "
                    f"bytes, got {len(payload)}")
            pixels = np.frombuffer(payload, dtype=np.uint8)
            return pixels.reshape(n, 1, h, w).astype(np.float64)
        if magic == LABEL_MAGIC:
            n = struct.unpack(">I", _read_exact(f, 4, 4, "count"))[0]
            payload = f.read()
            if len(payload) != n:
                raise IdxParseError(
                    f"truncated IDX payload at byte 8: expected {n} bytes, "
                    f"got {len(payload)}")
            return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
        raise IdxParseError(f"bad IDX magic 0x{magic:08x} at byte 0")


def pad_images(images: np.ndarray, size: int = 32) -> np.ndarray:
    """Zero-pad square images up to `size` (centered), the usual prepping
    for a model whose levels require divisibility by powers of two."""
    n, c, h, w = images.shape
    if h > size or w > size:
        raise ValueError(f"images {h}x{w} larger than target {size}")
    out = np.zeros((n, c, size, size))
    y, x = (size - h) // 2, (size - w) // 2
    out[:, :, y:y + h, x:x + w] = images
    return out
