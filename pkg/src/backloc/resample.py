"""Patch-to-pixel and pixel-to-patch mask resampling."""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .shards import BinaryMask, PatchGrid, SoftMask

_LERP_CACHE: dict[tuple[int, int, int, int], tuple] = {}


def _lerp_weights(rows, cols, height, width):
    key = (rows, cols, height, width)
    cached = _LERP_CACHE.get(key)
    if cached is not None:
        return cached
    ys = np.linspace(0.0, rows - 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(0.0, cols - 1.0, width) if width > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, rows - 1)
    x1 = np.minimum(x0 + 1, cols - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    cached = (y0, y1, x0, x1, wy, wx)
    _LERP_CACHE[key] = cached
    return cached


def upsample(mask: SoftMask, grid: PatchGrid) -> SoftMask:
    """Corner-aligned bilinear interpolation of a patch mask to pixel size."""
    v = mask.values.astype(np.float64)
    rows, cols = v.shape
    if (rows, cols) != (grid.rows, grid.cols):
        raise DataError(
            f"mask {rows}x{cols} does not match grid {grid.rows}x{grid.cols}"
        )
    y0, y1, x0, x1, wy, wx = _lerp_weights(rows, cols, grid.height_px, grid.width_px)
    top = v[y0][:, x0] * (1.0 - wx) + v[y0][:, x1] * wx
    bottom = v[y1][:, x0] * (1.0 - wx) + v[y1][:, x1] * wx
    out = top * (1.0 - wy) + bottom * wy
    # lerp of in-range values can drift past the bounds by an ulp
    return SoftMask("pixel", np.clip(out, 0.0, 1.0))


def downsample_mean(mask_values: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Per-patch block means of a pixel-resolution array."""
    if mask_values.shape != (grid.height_px, grid.width_px):
        raise DataError(
            f"pixel mask {mask_values.shape} does not match grid "
            f"{grid.height_px}x{grid.width_px}"
        )
    p = grid.patch_size
    blocks = mask_values.astype(np.float64).reshape(grid.rows, p, grid.cols, p)
    return blocks.mean(axis=(1, 3))


def downsample_majority(mask: BinaryMask, grid: PatchGrid) -> BinaryMask:
    """Pixel binary mask to patch resolution by per-block majority vote."""
    means = downsample_mean(mask.values, grid)
    return BinaryMask("patch", (means >= 0.5).astype(np.uint8))
