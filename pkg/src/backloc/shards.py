"""Core tensor types and the on-disk shard interchange format.

A shard directory holds one ``manifest.json`` plus, per sample, NPY
tensors for attention and features, a PNG of the RGB view, and optional
ground-truth artifacts (grayscale PNG mask with value >= 128 meaning
foreground, JSON box list with inclusive pixel coordinates). The schema
is documented in the README so other producers can write it without
sharing code.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError
from .npyio import read_tensor, write_tensor

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "shard-dir-v1"
_SAMPLE_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass(frozen=True)
class PatchGrid:
    """Geometry linking a pixel image to its square patch decomposition."""

    width_px: int
    height_px: int
    patch_size: int

    def __post_init__(self):
        if self.patch_size <= 0:
            raise DataError(f"patch_size must be positive, got {self.patch_size}")
        if self.width_px % self.patch_size or self.height_px % self.patch_size:
            raise DataError(
                f"image {self.width_px}x{self.height_px} is not divisible "
                f"by patch size {self.patch_size}"
            )

    @property
    def rows(self) -> int:
        return self.height_px // self.patch_size

    @property
    def cols(self) -> int:
        return self.width_px // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class AttentionStack:
    """Per-image CLS-to-patch attention, one column per head (N x h)."""

    grid: PatchGrid
    values: np.ndarray  # row-major over patches

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != self.grid.n_patches:
            raise DataError(
                f"attention shape {v.shape} does not match grid with "
                f"{self.grid.n_patches} patches"
            )
        if not np.all(np.isfinite(v)):
            raise DataError("attention contains non-finite values")
        if np.any(v < 0):
            raise DataError("attention contains negative values")

    @property
    def heads(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureStack:
    """Per-head patch features, shape (h, N, d)."""

    grid: PatchGrid
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[1] != self.grid.n_patches:
            raise DataError(
                f"feature shape {v.shape} does not match grid with "
                f"{self.grid.n_patches} patches"
            )
        if not np.all(np.isfinite(v)):
            raise DataError("features contain non-finite values")

    @property
    def heads(self) -> int:
        return self.values.shape[0]

    @property
    def dim_per_head(self) -> int:
        return self.values.shape[2]

    def concat(self) -> np.ndarray:
        """Plain per-patch concatenation over heads, shape (N, h*d)."""
        h, n, d = self.values.shape
        return np.transpose(self.values, (1, 0, 2)).reshape(n, h * d)


@dataclass(frozen=True)
class WeightedFeatures:
    """Head-weighted concatenated features, shape (N, h*d)."""

    grid: PatchGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.n_patches:
            raise DataError(f"weighted feature shape {self.values.shape} invalid")

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SoftMask:
    """2-D mask with real values in [0, 1], at patch or pixel resolution."""

    resolution: str  # "patch" | "pixel"
    values: np.ndarray

    def __post_init__(self):
        _check_resolution(self.resolution)
        v = self.values
        if v.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise DataError("soft mask values must be finite and within [0, 1]")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """2-D mask with values in {0, 1}, at patch or pixel resolution."""

    resolution: str
    values: np.ndarray

    def __post_init__(self):
        _check_resolution(self.resolution)
        v = self.values
        if v.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {v.shape}")
        if v.dtype != np.uint8:
            raise DataError(f"binary mask must be uint8, got {v.dtype}")
        if v.size and v.max() > 1:
            raise DataError("binary mask values must be 0 or 1")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def complement(self) -> "BinaryMask":
        return BinaryMask(self.resolution, (1 - self.values).astype(np.uint8))


def _check_resolution(res):
    if res not in ("patch", "pixel"):
        raise DataError(f"unknown mask resolution {res!r}")


def binarize(mask: SoftMask, threshold: float) -> BinaryMask:
    """Threshold a soft mask; values >= threshold become foreground."""
    return BinaryMask(mask.resolution, (mask.values >= threshold).astype(np.uint8))


@dataclass(frozen=True)
class RgbImage:
    """8-bit interleaved RGB image, shape (H, W, 3)."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[2] != 3:
            raise DataError(f"RGB image must have shape (H, W, 3), got {v.shape}")
        if v.dtype != np.uint8:
            raise DataError(f"RGB image must be uint8, got {v.dtype}")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with inclusive pixel coordinates."""

    xmin: int
    ymin: int
    xmax: int
    ymax: int

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise DataError(f"degenerate box {self}")

    def area(self) -> int:
        return (self.xmax - self.xmin + 1) * (self.ymax - self.ymin + 1)

    def as_list(self):
        return [self.xmin, self.ymin, self.xmax, self.ymax]


@dataclass(frozen=True)
class Shard:
    """One sample's packaged tensors plus optional ground truth."""

    sample_id: str
    image: RgbImage
    attention: AttentionStack
    features: FeatureStack
    gt_mask: BinaryMask | None = None
    gt_boxes: tuple[BBox, ...] | None = None

    def __post_init__(self):
        if not _SAMPLE_ID_RE.match(self.sample_id):
            raise DataError(f"sample id {self.sample_id!r} is not filesystem-safe")
        if self.attention.grid != self.features.grid:
            raise DataError(
                f"grid mismatch: attention has {self.attention.grid.n_patches} "
                f"patches, features have {self.features.grid.n_patches}"
            )
        g = self.attention.grid
        if self.image.width != g.width_px or self.image.height != g.height_px:
            raise DataError(
                f"image {self.image.width}x{self.image.height} does not match "
                f"grid {g.width_px}x{g.height_px}"
            )
        if self.gt_mask is not None:
            if self.gt_mask.resolution != "pixel":
                raise DataError("ground-truth mask must be at pixel resolution")
            if self.gt_mask.values.shape != (g.height_px, g.width_px):
                raise DataError(
                    f"gt mask shape {self.gt_mask.values.shape} does not match "
                    f"image {g.height_px}x{g.width_px}"
                )
        if self.gt_boxes is not None:
            for box in self.gt_boxes:
                if box.xmax >= g.width_px or box.ymax >= g.height_px or box.xmin < 0 or box.ymin < 0:
                    raise DataError(f"gt box {box} outside image bounds")

    @property
    def grid(self) -> PatchGrid:
        return self.attention.grid


# ---------------------------------------------------------------------------
# image / mask file helpers

def save_png_image(path, image: RgbImage, text: dict | None = None) -> None:
    save_png_array(path, image.values, text)


def load_png_image(path) -> RgbImage:
    with Image.open(path) as im:
        return RgbImage(np.asarray(im.convert("RGB"), dtype=np.uint8))


def save_png_mask(path, mask: BinaryMask, text: dict | None = None) -> None:
    save_png_array(path, (mask.values * 255).astype(np.uint8), text)


def load_png_mask(path, resolution="pixel") -> BinaryMask:
    """Grayscale PNG where value >= 128 means foreground."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.uint8)
    return BinaryMask(resolution, (gray >= 128).astype(np.uint8))


def save_png_soft(path, mask: SoftMask, text: dict | None = None) -> None:
    """Store a soft mask as grayscale, scaled to [0, 255] by rounding."""
    save_png_array(path, np.rint(mask.values * 255).astype(np.uint8), text)


def load_png_soft(path, resolution="pixel") -> SoftMask:
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.uint8)
    return SoftMask(resolution, gray.astype(np.float64) / 255.0)


def save_png_array(path, array, text=None):
    im = Image.fromarray(array)
    pnginfo = None
    if text:
        from PIL.PngImagePlugin import PngInfo

        pnginfo = PngInfo()
        for key, value in text.items():
            pnginfo.add_text(key, str(value))
    im.save(path, format="PNG", pnginfo=pnginfo)


def save_boxes(path, boxes) -> None:
    with open(path, "w") as fh:
        json.dump([b.as_list() for b in boxes], fh)


def load_boxes(path) -> tuple[BBox, ...]:
    with open(path) as fh:
        raw = json.load(fh)
    try:
        return tuple(BBox(*[int(v) for v in item]) for item in raw)
    except TypeError as exc:
        raise DataError(f"malformed box file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# shard directory IO

def _paths(directory, sample_id):
    base = os.path.join(directory, sample_id)
    return {
        "image": base + ".image.png",
        "attention": base + ".attn.npy",
        "features": base + ".feat.npy",
        "gt_mask": base + ".gt_mask.png",
        "gt_boxes": base + ".gt_boxes.json",
    }


def read_manifest(directory) -> dict:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST_NAME} in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(
            f"unsupported manifest format {manifest.get('format')!r} in {directory}"
        )
    return manifest


def _write_manifest(directory, manifest) -> None:
    manifest["samples"] = sorted(manifest["samples"], key=lambda s: s["sample_id"])
    tmp = os.path.join(directory, MANIFEST_NAME + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(directory, MANIFEST_NAME))


def list_samples(directory) -> list[str]:
    return [s["sample_id"] for s in read_manifest(directory)["samples"]]


def write_shard(directory, shard: Shard) -> None:
    """Write all of a shard's files and register it in the manifest.

    Writing the same sample id twice overwrites the previous entry.
    """
    os.makedirs(directory, exist_ok=True)
    paths = _paths(directory, shard.sample_id)
    g = shard.grid
    write_tensor(paths["attention"], shard.attention.values)
    write_tensor(paths["features"], shard.features.values)
    save_png_image(paths["image"], shard.image)
    if shard.gt_mask is not None:
        save_png_mask(paths["gt_mask"], shard.gt_mask)
    elif os.path.exists(paths["gt_mask"]):
        os.remove(paths["gt_mask"])
    if shard.gt_boxes is not None:
        save_boxes(paths["gt_boxes"], shard.gt_boxes)
    elif os.path.exists(paths["gt_boxes"]):
        os.remove(paths["gt_boxes"])

    entry = {
        "sample_id": shard.sample_id,
        "width_px": g.width_px,
        "height_px": g.height_px,
        "patch_size": g.patch_size,
        "heads": shard.attention.heads,
        "dim_per_head": shard.features.dim_per_head,
        "has_gt_mask": shard.gt_mask is not None,
        "has_gt_boxes": shard.gt_boxes is not None,
    }
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if os.path.exists(manifest_path):
        manifest = read_manifest(directory)
        manifest["samples"] = [
            s for s in manifest["samples"] if s["sample_id"] != shard.sample_id
        ]
    else:
        manifest = {"format": MANIFEST_FORMAT, "samples": []}
    manifest["samples"].append(entry)
    _write_manifest(directory, manifest)


def load_shard(directory, sample_id) -> Shard:
    """Load one sample, validating every cross-field invariant."""
    manifest = read_manifest(directory)
    entries = [s for s in manifest["samples"] if s["sample_id"] == sample_id]
    if not entries:
        raise DataError(f"sample {sample_id!r} not listed in {directory}")
    entry = entries[0]
    paths = _paths(directory, sample_id)
    for key in ("image", "attention", "features"):
        if not os.path.exists(paths[key]):
            raise DataError(f"missing {key} file for sample {sample_id}: {paths[key]}")

    grid = PatchGrid(entry["width_px"], entry["height_px"], entry["patch_size"])
    att = read_tensor(paths["attention"])
    feat = read_tensor(paths["features"])
    if att.ndim != 2 or att.shape != (grid.n_patches, entry["heads"]):
        raise DataError(
            f"sample {sample_id}: attention shape {att.shape} does not match "
            f"manifest (N={grid.n_patches}, h={entry['heads']})"
        )
    if feat.shape != (entry["heads"], grid.n_patches, entry["dim_per_head"]):
        raise DataError(
            f"sample {sample_id}: feature shape {feat.shape} does not match "
            f"manifest (h={entry['heads']}, N={grid.n_patches}, d={entry['dim_per_head']})"
        )

    gt_mask = None
    if entry.get("has_gt_mask"):
        if not os.path.exists(paths["gt_mask"]):
            raise DataError(f"missing gt mask file for sample {sample_id}")
        gt_mask = load_png_mask(paths["gt_mask"])
    gt_boxes = None
    if entry.get("has_gt_boxes"):
        if not os.path.exists(paths["gt_boxes"]):
            raise DataError(f"missing gt boxes file for sample {sample_id}")
        gt_boxes = load_boxes(paths["gt_boxes"])

    return Shard(
        sample_id=sample_id,
        image=load_png_image(paths["image"]),
        attention=AttentionStack(grid, att),
        features=FeatureStack(grid, feat),
        gt_mask=gt_mask,
        gt_boxes=gt_boxes,
    )
