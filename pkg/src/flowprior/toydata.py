"""Deterministic synthetic sprite images for desk-scale experiments.

Each image is a flat, lightly noisy background with one shape silhouette
(rectangle, cross or disc) in a contrasting color, jittered around the
center. 32x32 by default so a three-level model trains in minutes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import make_rng


@dataclass
class SpriteSpec:
    size: int = 32
    channels: int = 3
    kinds: tuple = ("rect", "cross", "disc")
    jitter: int = 4
    bg_noise: float = 8.0
    seed: int = 0


def _draw_shape(img: np.ndarray, kind: str, cy: int, cx: int, r: int, color):
    s = img.shape[1]
    if kind == "rect":
        img[:, max(0, cy - r):cy + r, max(0, cx - r):cx + r] = color[:, None, None]
    elif kind == "cross":
        t = max(1, r // 2)
        img[:, max(0, cy - r):cy + r, max(0, cx - t):cx + t] = color[:, None, None]
        img[:, max(0, cy - t):cy + t, max(0, cx - r):cx + r] = color[:, None, None]
    else:
        yy, xx = np.ogrid[:s, :s]
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[:, inside] = color[:, None]


def generate(spec: SpriteSpec, n: int):
    """n sprite images (n, C, size, size) with integer pixels in [0,255],
    plus a 90/10 train/test split by index."""
    rng = make_rng(spec.seed, "sprites")
    s, c = spec.size, spec.channels
    images = np.zeros((n, c, s, s))
    for i in range(n):
        bg = rng.uniform(0, 120, c)
        fg = rng.uniform(135, 255, c)
        img = bg[:, None, None] + rng.normal(0, spec.bg_noise, (c, s, s))
        kind = spec.kinds[int(rng.integers(0, len(spec.kinds)))]
        cy = s // 2 + int(rng.integers(-spec.jitter, spec.jitter + 1))
        cx = s // 2 + int(rng.integers(-spec.jitter, spec.jitter + 1))
        r = int(rng.integers(s // 6, s // 3))
        _draw_shape(img, kind, cy, cx, r, fg)
        images[i] = img
    images = np.clip(np.round(images), 0, 255)
    split = (n * 9) // 10
    return images[:split], images[split:]
