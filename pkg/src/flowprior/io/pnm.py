"""Binary portable pixmaps: P5 (grayscale) and P6 (RGB), 8-bit only."""

from __future__ import annotations

import numpy as np


class PnmError(ValueError):
    pass


def _read_token(buf: bytes, pos: int):
    while pos < len(buf):
        ch = buf[pos:pos + 1]
        if ch == b"#":
            nl = buf.find(b"\n", pos)
            pos = len(buf) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PnmError(f"unexpected end of header at byte {start}")
    return buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Returns (C,H,W) float64 pixels in [0,255]; C is 1 for P5, 3 for P6."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported pixmap magic {magic!r}")
    w_tok, pos = _read_token(buf, pos)
    h_tok, pos = _read_token(buf, pos)
    maxval_tok, pos = _read_token(buf, pos)
    w, h, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    if maxval != 255:
        raise PnmError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    channels = 1 if magic == b"P5" else 3
    expected = w * h * channels
    payload = buf[pos:pos + expected]
    if len(payload) != expected:
        raise PnmError(f"pixmap payload truncated: header says {expected} "
                       f"bytes, file has {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    if channels == 1:
        return data.reshape(1, h, w)
    return data.reshape(h, w, 3).transpose(2, 0, 1)


def write_pnm(path, image: np.ndarray):
    """Writes (C,H,W) or (H,W) pixels as P5/P6 after rounding to 8 bits."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise PnmError(f"expected (1|3,H,W) image, got shape {img.shape}")
    c, h, w = img.shape
    data = np.clip(np.round(img), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n" if c == 1 else b"P6\n")
        f.write(f"{w} {h}\n255\n".encode())
        if c == 1:
            f.write(data[0].tobytes())
        else:
            f.write(data.transpose(1, 2, 0).tobytes())
