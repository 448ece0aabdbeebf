"""Hard rasterization of rect layouts onto integer pixel grids."""

from __future__ import annotations

import numpy as np

from .grammar import RectLayout, TERMINAL_INDEX, TERMINALS

BACKGROUND = -1


def label_map(layout: RectLayout, res_x: int, res_y: int | None = None) -> np.ndarray:
    """Paint rects (in list order, later wins) onto a label-index grid.

    Returns an int8 array of shape (res_y, res_x); uncovered pixels hold
    ``BACKGROUND``. Edges snap to the nearest pixel boundary, so the rects of
    an exact tiling cover the grid with neither gaps nor double counting.
    """
    if res_y is None:
        res_y = res_x
    grid = np.full((res_y, res_x), BACKGROUND, dtype=np.int8)
    for r in layout.rects:
        ix0 = min(max(int(np.floor(r.x * res_x + 0.5)), 0), res_x)
        ix1 = min(max(int(np.floor((r.x + r.w) * res_x + 0.5)), 0), res_x)
        iy0 = min(max(int(np.floor(r.y * res_y + 0.5)), 0), res_y)
        iy1 = min(max(int(np.floor((r.y + r.h) * res_y + 0.5)), 0), res_y)
        grid[iy0:iy1, ix0:ix1] = TERMINAL_INDEX[r.label]
    return grid


def one_hot(layout: RectLayout, res_x: int, res_y: int | None = None) -> np.ndarray:
    """Per-label channel raster, shape (len(TERMINALS), res_y, res_x)."""
    lm = label_map(layout, res_x, res_y)
    out = np.zeros((len(TERMINALS),) + lm.shape, dtype=np.float64)
    for i in range(len(TERMINALS)):
        out[i] = lm == i
    return out


def pixel_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of pixels whose labels differ between two label maps."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(a != b))
