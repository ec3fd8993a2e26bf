"""Inference-time composition: head output to pixel masks and boxes.

Soft patch masks are upsampled bilinearly (corner-aligned), optionally
refined with the bilateral solver, binarized at 0.5, labeled into
4-connected components, and reduced to either the biggest component
(``single``) or all components (``multi``) before boxes are extracted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi

from . import bilateral
from .errors import ConfigError, DataError
from .head import SegHeadParams, forward, head_features
from .resample import downsample_majority, downsample_mean, upsample  # noqa: F401
from .shards import BBox, BinaryMask, Shard, SoftMask, binarize


@dataclass(frozen=True)
class InferenceConfig:
    mode: str = "single"  # "single" | "multi"
    post_bs: bool = False
    min_component_frac: float = 0.01  # used by retrieval prototypes only
    connectivity: int = 4

    def __post_init__(self):
        if self.mode not in ("single", "multi"):
            raise ConfigError(f"unknown inference mode {self.mode!r}")
        if not 0.0 <= self.min_component_frac < 1.0:
            raise ConfigError("min_component_frac must lie in [0, 1)")
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")


class ComponentLabeling:
    """Connected components with labels in first-scan order.

    Component k occupies ``labels == k + 1``; labels are ordered by the
    row-major position of each component's first pixel. The dense
    relabeled array is materialized lazily since selection and box
    extraction only need areas and per-component masks.
    """

    def __init__(self, raw_labels: np.ndarray, order: np.ndarray, areas: np.ndarray):
        self._raw = raw_labels  # backend labeling, arbitrary label order
        self._order = order  # order[k] = raw label of component k, minus 1
        self.areas = areas  # pixel areas, first-scan order
        self._labels = None

    @property
    def count(self) -> int:
        return len(self.areas)

    @property
    def labels(self) -> np.ndarray:
        if self._labels is None:
            n = self.count
            remap = np.empty(n + 1, dtype=np.int32)
            remap[0] = 0
            remap[self._order + 1] = np.arange(1, n + 1, dtype=np.int32)
            self._labels = remap[self._raw.ravel()].reshape(self._raw.shape)
        return self._labels

    def component_mask(self, index: int) -> np.ndarray:
        return self._raw == self._order[index] + 1

    def any_mask(self) -> np.ndarray:
        return self._raw > 0


_STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCTURE_8 = np.ones((3, 3), dtype=bool)


def connected_components(mask: BinaryMask, connectivity: int = 4) -> ComponentLabeling:
    """Label connected foreground regions of a binary mask."""
    if connectivity not in (4, 8):
        raise DataError("connectivity must be 4 or 8")
    structure = _STRUCTURE_4 if connectivity == 4 else _STRUCTURE_8
    labels, n = ndi.label(mask.values, structure=structure)
    if n == 0:
        return ComponentLabeling(labels.astype(np.int32), np.zeros(0, np.int64), np.zeros(0, np.int64))
    # first-scan ordering regardless of the labeling backend: a reversed
    # scatter leaves each label's first flat position behind
    flat = labels.ravel()
    nonzero = np.nonzero(flat)[0]
    first = np.empty(n + 1, dtype=np.int64)
    first[flat[nonzero[::-1]]] = nonzero[::-1]
    order = np.argsort(first[1:], kind="stable")
    raw_areas = np.bincount(flat, minlength=n + 1)[1:]
    return ComponentLabeling(labels, order, raw_areas[order].astype(np.int64))


def select(components: ComponentLabeling, mode: str, resolution: str = "pixel") -> tuple[BinaryMask, bool]:
    """Reduce a labeling to a mask per the evaluation protocol.

    ``single`` keeps the biggest component (ties to the lowest label),
    ``multi`` keeps everything. Returns (mask, degenerate) where
    degenerate flags an empty labeling.
    """
    if mode not in ("single", "multi"):
        raise DataError(f"unknown selection mode {mode!r}")
    if components.count == 0:
        empty = np.zeros(components.any_mask().shape, dtype=np.uint8)
        return BinaryMask(resolution, empty), True
    if mode == "multi":
        return BinaryMask(resolution, components.any_mask().astype(np.uint8)), False
    best = int(np.argmax(components.areas))  # first max wins ties
    return BinaryMask(resolution, components.component_mask(best).astype(np.uint8)), False


def boxes_from_mask(mask: BinaryMask, mode: str, connectivity: int = 4) -> list[BBox]:
    """Tight inclusive bounding boxes of the selected components."""
    components = connected_components(mask, connectivity)
    if components.count == 0:
        return []
    if mode == "single":
        selected, _ = select(components, "single", mask.resolution)
        components = connected_components(selected, connectivity)
    boxes = []
    for k in range(components.count):
        ys, xs = np.nonzero(components.component_mask(k))
        boxes.append(BBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())))
    return boxes


@dataclass(frozen=True)
class InferenceResult:
    mask: BinaryMask  # pixel resolution, after protocol selection
    boxes: list[BBox]
    soft: SoftMask  # pixel resolution, before binarization
    degenerate: bool


def infer(
    shard: Shard,
    head: SegHeadParams,
    cfg: InferenceConfig,
    bs: bilateral.SolverParams,
) -> InferenceResult:
    """Forward pass to final mask and boxes for one shard."""
    feats = head_features(shard)
    soft_patch = forward(head, feats, shard.grid)
    soft_pixel = upsample(soft_patch, shard.grid)
    if cfg.post_bs:
        grid = bilateral.build_grid(shard.image, bs)
        ones = SoftMask("pixel", np.ones(grid.shape))
        soft_pixel = bilateral.solve(grid, soft_pixel, ones, bs)
        binary = binarize(soft_pixel, bs.binarize_threshold)
    else:
        binary = binarize(soft_pixel, 0.5)
    components = connected_components(binary, cfg.connectivity)
    mask, degenerate = select(components, cfg.mode)
    boxes = boxes_from_mask(mask, cfg.mode, cfg.connectivity)
    return InferenceResult(mask=mask, boxes=boxes, soft=soft_pixel, degenerate=degenerate)
