"""Image quality metrics."""

from __future__ import annotations

import math

import numpy as np

PSNR_CAP = 99.0


def psnr(a, b, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs report the 99 dB
    table cap rather than infinity."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(peak) - 10.0 * math.log10(mse))
