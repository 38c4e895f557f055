"""Synthetic degradations: additive noise, masked blocks, DCT quantization.

All operators take and return integer pixels in [0,255] and report a
binary validity mask (zeros where pixels were destroyed by masking).
The compression artifact is a quantized blockwise 8x8 DCT with the
standard luminance table; there is no entropy coding or chroma handling,
the goal is the characteristic blocking/ringing, not a codec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

# standard luminance quantization table
LUMA_QUANT = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


class ParameterError(ValueError):
    pass


@dataclass
class Degradation:
    """kind: gauss (sigma), uniform (half-width a), mask (count, size) or
    dct (quality 1-100); parameters are on the 0-255 pixel scale."""

    kind: str
    sigma: float = 0.0
    a: float = 0.0
    count: int | None = None
    size: int = 10
    quality: int = 50

    def __post_init__(self):
        if self.kind not in ("gauss", "uniform", "mask", "dct"):
            raise ParameterError(f"unknown degradation kind {self.kind!r}")
        if self.kind == "dct" and not (1 <= self.quality <= 100):
            raise ParameterError(f"dct quality must be in [1,100], got {self.quality}")


def quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the usual quality mapping; quality 100
    collapses to an all-ones table (lossless up to rounding)."""
    if quality < 50:
        s = 5000.0 / quality
    else:
        s = 200.0 - 2.0 * quality
    q = np.floor((LUMA_QUANT * s + 50.0) / 100.0)
    return np.clip(q, 1.0, 255.0)


def _dct_quantize(img: np.ndarray, quality: int) -> np.ndarray:
    c, h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge") - 128.0
    hb, wb = x.shape[1] // 8, x.shape[2] // 8
    blocks = x.reshape(c, hb, 8, wb, 8)
    coef = dctn(blocks, axes=(2, 4), norm="ortho")
    q = quant_table(quality)[None, None, :, None, :]
    coef = np.round(coef / q) * q
    out = idctn(coef, axes=(2, 4), norm="ortho").reshape(c, hb * 8, wb * 8)
    out = out[:, :h, :w] + 128.0
    return np.clip(np.round(out), 0, 255)


def _default_block_count(h: int, w: int, size: int) -> int:
    return max(1, round(0.1 * h * w / (size * size)))


def apply(d: Degradation, img: np.ndarray, rng: np.random.Generator):
    """Degrade one image (C,H,W); returns (degraded, mask), both on the
    integer 0-255 / {0,1} scales."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    mask = np.ones((c, h, w))
    if d.kind == "gauss":
        out = img + rng.normal(0.0, d.sigma, img.shape) if d.sigma > 0 else img.copy()
    elif d.kind == "uniform":
        out = img + rng.uniform(-d.a, d.a, img.shape) if d.a > 0 else img.copy()
    elif d.kind == "mask":
        if d.size > min(h, w):
            raise ParameterError(f"mask block {d.size} exceeds image {h}x{w}")
        count = d.count if d.count is not None else _default_block_count(h, w, d.size)
        out = img.copy()
        for _ in range(count):
            y = int(rng.integers(0, h - d.size + 1))
            x = int(rng.integers(0, w - d.size + 1))
            out[:, y:y + d.size, x:x + d.size] = 0.0
            mask[:, y:y + d.size, x:x + d.size] = 0.0
    else:
        out = _dct_quantize(img, d.quality)
    return np.clip(np.round(out), 0, 255), mask


def compose(ds, img: np.ndarray, rng: np.random.Generator):
    """Left-to-right application; masks combine with AND."""
    if not ds:
        raise ParameterError("compose needs at least one degradation")
    out = np.asarray(img, dtype=np.float64)
    mask = None
    for d in ds:
        out, m = apply(d, out, rng)
        mask = m if mask is None else mask * m
    return out, mask


def parse_spec(spec: str):
    """CLI grammar, e.g. 'gauss:30+mask:6x10+dct:10' or 'uniform:40'.

    mask takes COUNTxSIZE or just SIZE (count then covers ~10% of pixels).
    """
    ds = []
    for part in spec.split("+"):
        part = part.strip()
        if not part:
            continue
        kind, _, arg = part.partition(":")
        kind = kind.lower()
        if kind == "gauss":
            ds.append(Degradation("gauss", sigma=float(arg)))
        elif kind in ("uniform", "uni"):
            ds.append(Degradation("uniform", a=float(arg)))
        elif kind == "mask":
            if "x" in arg:
                cnt, _, sz = arg.partition("x")
                ds.append(Degradation("mask", count=int(cnt), size=int(sz)))
            else:
                ds.append(Degradation("mask", size=int(arg) if arg else 10))
        elif kind == "dct":
            ds.append(Degradation("dct", quality=int(arg)))
        else:
            raise ParameterError(f"unknown degradation {kind!r} in spec {spec!r}")
    if not ds:
        raise ParameterError(f"empty degradation spec {spec!r}")
    return ds
