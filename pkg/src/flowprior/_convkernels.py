"""im2col/col2im kernels for the 3x3 convolution (zero padding 1).

Column layout is (N, C*9, H*W) with k = c*9 + dy*3 + dx, which keeps the
subsequent GEMMs contiguous. The numba versions are sequential on
purpose: the kernels are memory-bound and numba's thread pool fights the
BLAS pool on small machines. The numpy fallbacks compute identical
results (asserted in the test suite).
"""

from __future__ import annotations

import numpy as np


def _im2col3_np(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, c, 3, 3, h, w))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(n, c * 9, h * w)


def _col2im3_np(gcols: np.ndarray, h: int, w: int) -> np.ndarray:
    n, ck, _ = gcols.shape
    c = ck // 9
    gc = gcols.reshape(n, c, 3, 3, h, w)
    out = np.zeros((n, c, h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            out[:, :, dy:dy + h, dx:dx + w] += gc[:, :, dy, dx]
    return np.ascontiguousarray(out[:, :, 1:-1, 1:-1])


try:
    from numba import njit

    @njit(cache=True)
    def _im2col3_nb(x):  # pragma: no cover - exercised via im2col3
        n, c, h, w = x.shape
        cols = np.empty((n, c * 9, h * w))
        for ni in range(n):
            for ci in range(c):
                for dy in range(3):
                    for dx in range(3):
                        k = ci * 9 + dy * 3 + dx
                        for y in range(h):
                            sy = y + dy - 1
                            base = y * w
                            if sy < 0 or sy >= h:
                                for xx in range(w):
                                    cols[ni, k, base + xx] = 0.0
                                continue
                            for xx in range(w):
                                sx = xx + dx - 1
                                if 0 <= sx < w:
                                    cols[ni, k, base + xx] = x[ni, ci, sy, sx]
                                else:
                                    cols[ni, k, base + xx] = 0.0
        return cols

    @njit(cache=True)
    def _col2im3_nb(gcols, h, w):  # pragma: no cover - exercised via col2im3
        n, ck, _ = gcols.shape
        c = ck // 9
        out = np.zeros((n, c, h, w))
        for ni in range(n):
            for ci in range(c):
                for dy in range(3):
                    for dx in range(3):
                        k = ci * 9 + dy * 3 + dx
                        for y in range(h):
                            sy = y + dy - 1
                            if sy < 0 or sy >= h:
                                continue
                            base = y * w
                            for xx in range(w):
                                sx = xx + dx - 1
                                if 0 <= sx < w:
                                    out[ni, ci, sy, sx] += gcols[ni, k, base + xx]
        return out

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def im2col3(x: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        return _im2col3_nb(np.ascontiguousarray(x))
    return _im2col3_np(x)


def col2im3(gcols: np.ndarray, h: int, w: int) -> np.ndarray:
    if HAVE_NUMBA:
        return _col2im3_nb(np.ascontiguousarray(gcols), h, w)
    return _col2im3_np(gcols, h, w)
