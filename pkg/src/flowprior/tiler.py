"""Patch-wise restoration of arbitrary-size images.

The image is covered by fixed-size source patches whose interiors overlap
by twice the margin; each patch contributes only its core (source minus
the margin on interior sides), and the cores partition the image exactly,
so every output pixel is written once. Edge patches sit flush with the
borders; an image smaller than the patch becomes a single zero-padded
tile whose padding is masked out of the data term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .restoration import RestorationProblem, Schedule, coarse_to_fine_optimize


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    y0: int
    x0: int
    y1: int
    x1: int


@dataclass
class TileGrid:
    image_h: int
    image_w: int
    patch: int
    margin: int
    tiles: list = field(default_factory=list)  # (source Rect, core Rect) pairs


def _axis_plan(extent: int, patch: int, margin: int):
    """Anchors and core boundaries along one axis; cores partition [0, extent)."""
    if extent <= patch:
        return [(0, 0, extent)]
    anchors = [0]
    while anchors[-1] + patch < extent:
        anchors.append(min(anchors[-1] + patch - 2 * margin, extent - patch))
    spans = []
    for i, a in enumerate(anchors):
        lo = 0 if i == 0 else anchors[i] + margin
        hi = extent if i == len(anchors) - 1 else anchors[i + 1] + margin
        spans.append((a, lo, hi))
    return spans


def plan(image_h: int, image_w: int, patch: int = 64, margin: int = 4) -> TileGrid:
    if patch <= 2 * margin:
        raise ParameterError(f"patch {patch} must exceed twice the margin {margin}")
    if image_h < 1 or image_w < 1:
        raise ParameterError("degenerate image size")
    grid = TileGrid(image_h, image_w, patch, margin)
    for ay, cy0, cy1 in _axis_plan(image_h, patch, margin):
        for ax, cx0, cx1 in _axis_plan(image_w, patch, margin):
            src = Rect(ay, ax, min(ay + patch, image_h), min(ax + patch, image_w))
            grid.tiles.append((src, Rect(cy0, cx0, cy1, cx1)))
    return grid


@dataclass
class TiledRestoreResult:
    image: np.ndarray
    failures: list = field(default_factory=list)  # (tile index, reason)


def restore_tiled(model, problem: RestorationProblem, schedule: Schedule,
                  grid: TileGrid, seed: int = 0, init: str = "encode",
                  chunk: int = 64) -> TiledRestoreResult:
    """Restore each tile and stitch the cores. Tiles run in batches; a tile
    whose restoration fails (error or non-finite objective) falls back to
    the degraded input and is reported."""
    c_model, ph, pw = model.in_shape
    if ph != grid.patch or pw != grid.patch:
        raise ParameterError(f"model patch {ph}x{pw} does not match grid patch {grid.patch}")
    deg = problem.degraded
    if deg.shape[0] != 1:
        raise ParameterError("tiled restoration works on a single image")
    _, c, h, w = deg.shape
    if (h, w) != (grid.image_h, grid.image_w):
        raise ParameterError(f"grid planned for {grid.image_h}x{grid.image_w}, "
                             f"image is {h}x{w}")
    out = np.array(deg[0], dtype=np.float64)
    failures: list = []

    def cut(rect: Rect):
        tile = np.zeros((c, grid.patch, grid.patch))
        tmask = np.zeros((c, grid.patch, grid.patch))
        hh, ww = rect.y1 - rect.y0, rect.x1 - rect.x0
        tile[:, :hh, :ww] = deg[0, :, rect.y0:rect.y1, rect.x0:rect.x1]
        tmask[:, :hh, :ww] = problem.mask[0, :, rect.y0:rect.y1, rect.x0:rect.x1]
        return tile, tmask

    for lo in range(0, len(grid.tiles), chunk):
        batch = grid.tiles[lo:lo + chunk]
        tiles = np.stack([cut(src)[0] for src, _ in batch])
        masks = np.stack([cut(src)[1] for src, _ in batch])
        ok = np.zeros(len(batch), dtype=bool)
        res = None
        try:
            sub = RestorationProblem(tiles, masks, problem.lam)
            res = coarse_to_fine_optimize(model, sub, schedule,
                                          seed=seed + lo, init=init)
            ok = np.isfinite(res.best_objective)
        except Exception as exc:  # noqa: BLE001 - tile isolation is the contract
            failures.extend((lo + i, repr(exc)) for i in range(len(batch)))
        for i, (src, core) in enumerate(batch):
            if res is None or not ok[i]:
                if res is not None and not ok[i]:
                    failures.append((lo + i, "non-finite objective"))
                continue  # core keeps the degraded pixels
            oy, ox = core.y0 - src.y0, core.x0 - src.x0
            hh, ww = core.y1 - core.y0, core.x1 - core.x0
            out[:, core.y0:core.y1, core.x0:core.x1] = \
                res.image[i, :, oy:oy + hh, ox:ox + ww]
    return TiledRestoreResult(out[None], failures)
