"""Synthetic planted datasets with known ground truth.

Each generated shard carries a random blob of foreground patches whose
features sit in one cluster of directions and whose background patches
sit in another, at least 60 degrees away. Attention is low on background
patches and high on foreground ones, with per-head scale jitter so head
sparsities differ. Because the separation is planted, the expected
discovery output and the best possible head are known exactly, which is
what the end-to-end checks key on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .resample import upsample
from .shards import (
    AttentionStack,
    BBox,
    BinaryMask,
    FeatureStack,
    PatchGrid,
    RgbImage,
    Shard,
    SoftMask,
    binarize,
    write_shard,
)

BG_NOISE = 0.03
FG_CLASSES = (1, 2)

_PALETTE = np.array(
    [
        [(40, 80, 160), (220, 180, 60)],
        [(30, 120, 90), (200, 60, 120)],
        [(90, 90, 90), (240, 230, 200)],
        [(140, 60, 30), (60, 190, 210)],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class FixtureConfig:
    n_shards: int = 200
    grid_rows: int = 14
    grid_cols: int = 14
    patch_size: int = 8
    heads: int = 6
    dim_per_head: int = 64
    seed: int = 0
    with_classes: bool = False


def _random_blob(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """A union of 1-2 random rectangles covering 10-50% of the grid."""
    while True:
        mask = np.zeros((rows, cols), dtype=np.uint8)
        for _ in range(rng.integers(1, 3)):
            h = int(rng.integers(max(2, rows // 4), max(3, (2 * rows) // 3)))
            w = int(rng.integers(max(2, cols // 4), max(3, (2 * cols) // 3)))
            top = int(rng.integers(0, rows - h + 1))
            left = int(rng.integers(0, cols - w + 1))
            mask[top : top + h, left : left + w] = 1
        frac = mask.mean()
        if 0.08 <= frac <= 0.55:
            return mask


def _orthogonal_directions(rng: np.random.Generator, dim: int, k: int) -> np.ndarray:
    """k mutually orthogonal unit vectors in R^dim."""
    raw = rng.standard_normal((dim, k))
    q, _ = np.linalg.qr(raw)
    return q.T[:k]


def dataset_directions(cfg: FixtureConfig) -> np.ndarray:
    """Per-head cluster directions (heads, 3, d): background, class 1, class 2.

    Shared by every shard of a dataset, mirroring how a frozen feature
    extractor puts all images into one semantic space; a single linear
    head can then separate the planted clusters dataset-wide.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD1F]))
    return np.stack(
        [_orthogonal_directions(rng, cfg.dim_per_head, 3) for _ in range(cfg.heads)]
    )


def render_pixel_mask(patch_mask: BinaryMask, grid: PatchGrid) -> BinaryMask:
    """Canonical pixel rendering of a patch mask: bilinear then threshold.

    Fixture ground truth is defined at patch resolution; this rendering
    is the dataset's reference rasterization at pixel resolution.
    """
    soft = SoftMask("patch", patch_mask.values.astype(np.float64))
    return binarize(upsample(soft, grid), 0.5)


def make_planted_shard(
    sample_id: str,
    cfg: FixtureConfig,
    rng: np.random.Generator,
    directions: np.ndarray | None = None,
) -> tuple[Shard, np.ndarray]:
    """One synthetic shard plus its patch-resolution class map."""
    if directions is None:
        directions = dataset_directions(cfg)
    grid = PatchGrid(
        cfg.grid_cols * cfg.patch_size, cfg.grid_rows * cfg.patch_size, cfg.patch_size
    )
    rows, cols = cfg.grid_rows, cfg.grid_cols
    n = grid.n_patches

    classmap = np.zeros((rows, cols), dtype=np.int64)
    if cfg.with_classes:
        # one disjoint rectangle per class, separated by a column gap, so
        # each connected component carries exactly one class
        half = cols // 2
        for cls, lo, hi in (
            (FG_CLASSES[0], 0, half - 1),
            (FG_CLASSES[1], half + 1, cols),
        ):
            span = hi - lo
            w = int(rng.integers(2, max(3, span)))
            h = int(rng.integers(2, max(3, (2 * rows) // 3)))
            top = int(rng.integers(0, rows - h + 1))
            left = lo + int(rng.integers(0, span - w + 1))
            classmap[top : top + h, left : left + w] = cls
        fg_patch = (classmap > 0).astype(np.uint8)
    else:
        fg_patch = _random_blob(rng, rows, cols)
        classmap[fg_patch == 1] = FG_CLASSES[0]
    fg_flat = fg_patch.ravel().astype(bool)

    # per-head direction per planted class; mutually orthogonal so cosine
    # separation survives any positive head weighting
    feats = np.empty((cfg.heads, n, cfg.dim_per_head), dtype=np.float64)
    labels_flat = classmap.ravel()
    base = np.where(labels_flat == 0, 0, np.where(labels_flat == FG_CLASSES[0], 1, 2))
    for i in range(cfg.heads):
        feats[i] = directions[i][base] + BG_NOISE * rng.standard_normal(
            (n, cfg.dim_per_head)
        )

    # background patches get little CLS attention, foreground patches a
    # per-head boosted amount; weak heads leave part of the foreground
    # below the mean threshold, so head sparsities genuinely differ
    att = rng.uniform(0.05, 0.15, size=(n, cfg.heads))
    boost_scale = rng.uniform(0.15, 1.0, size=cfg.heads)
    att[fg_flat] += boost_scale[None, :] * rng.uniform(0.4, 1.0, size=(fg_flat.sum(), cfg.heads))

    gt_pixel = render_pixel_mask(BinaryMask("patch", fg_patch), grid)
    soft_pixel = upsample(SoftMask("patch", fg_patch.astype(np.float64)), grid)
    bg_color, fg_color = _PALETTE[rng.integers(0, len(_PALETTE))]
    blend = soft_pixel.values[..., None]
    image = (1.0 - blend) * bg_color + blend * fg_color
    image = image + rng.normal(0.0, 3.0, image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    from .pipeline import boxes_from_mask  # deferred: avoids import cycle

    boxes = tuple(boxes_from_mask(gt_pixel, mode="multi"))
    shard = Shard(
        sample_id=sample_id,
        image=RgbImage(image),
        attention=AttentionStack(grid, att),
        features=FeatureStack(grid, feats),
        gt_mask=gt_pixel,
        gt_boxes=boxes if boxes else None,
    )
    return shard, classmap


def make_planted_dataset(out_dir, cfg: FixtureConfig) -> list[str]:
    """Write a planted dataset; returns the generated sample ids.

    Besides the shards, a ``truth/`` subdirectory stores the planted
    patch-resolution foreground (the quantity every planted-data check
    compares against) and, with ``with_classes``, a ``classmaps/``
    subdirectory stores patch-resolution class ids for retrieval runs.
    """
    import os

    from PIL import Image

    rng = np.random.default_rng(cfg.seed)
    directions = dataset_directions(cfg)
    ids = []
    truth_dir = os.path.join(out_dir, "truth")
    os.makedirs(truth_dir, exist_ok=True)
    classes_dir = os.path.join(out_dir, "classmaps")
    if cfg.with_classes:
        os.makedirs(classes_dir, exist_ok=True)
    for k in range(cfg.n_shards):
        sid = f"planted{k:04d}"
        shard, classmap = make_planted_shard(sid, cfg, rng, directions)
        write_shard(out_dir, shard)
        truth = (classmap > 0).astype(np.uint8) * 255
        Image.fromarray(truth).save(os.path.join(truth_dir, sid + ".png"))
        if cfg.with_classes:
            Image.fromarray(classmap.astype(np.uint8)).save(
                os.path.join(classes_dir, sid + ".png")
            )
        ids.append(sid)
    return ids


def load_planted_truth(dataset_dir, sample_id) -> BinaryMask:
    """Patch-resolution planted foreground written by the generator."""
    import os

    from .shards import load_png_mask

    return load_png_mask(
        os.path.join(dataset_dir, "truth", sample_id + ".png"), resolution="patch"
    )


def load_planted_classmap(dataset_dir, sample_id) -> np.ndarray:
    import os

    from PIL import Image

    path = os.path.join(dataset_dir, "classmaps", sample_id + ".png")
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64)
