import numpy as np
import pytest

from backloc.shards import (
    AttentionStack,
    BinaryMask,
    FeatureStack,
    PatchGrid,
    RgbImage,
    Shard,
)


def smooth_image(rng, height, width, levels=4):
    """Low-frequency random RGB image; keeps bilateral grids non-trivial."""
    base = rng.random((levels, levels, 3))
    ys = np.linspace(0, levels - 1, height)
    xs = np.linspace(0, levels - 1, width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, levels - 1)
    x1 = np.minimum(x0 + 1, levels - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    img = (
        base[y0][:, x0] * (1 - wy) * (1 - wx)
        + base[y0][:, x1] * (1 - wy) * wx
        + base[y1][:, x0] * wy * (1 - wx)
        + base[y1][:, x1] * wy * wx
    )
    return (np.clip(img, 0, 1) * 255).astype(np.uint8)


def random_shard(rng, rows=4, cols=4, patch=4, heads=6, dim=8, with_gt=False):
    grid = PatchGrid(cols * patch, rows * patch, patch)
    n = grid.n_patches
    att = rng.uniform(0.0, 1.0, (n, heads))
    feats = rng.standard_normal((heads, n, dim))
    image = RgbImage(smooth_image(rng, grid.height_px, grid.width_px))
    gt = None
    if with_gt:
        gt = BinaryMask(
            "pixel",
            (rng.random((grid.height_px, grid.width_px)) < 0.3).astype(np.uint8),
        )
    return Shard(
        sample_id="rand0",
        image=image,
        attention=AttentionStack(grid, att),
        features=FeatureStack(grid, feats),
        gt_mask=gt,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
