"""Writer for the shard directory format.

Deliberately independent of the consumer package: tensors go through
``np.save`` (NPY v1.0, float32, C order) and the manifest follows the
schema documented in the consumer's README. Per-sample files are written
to temporaries and renamed, so partial extractions never leave a sample
half-written.
"""

from __future__ import annotations

import json
import os

import numpy as np

MANIFEST = "manifest.json"
FORMAT = "shard-dir-v1"


def _atomic_save_npy(path, array) -> None:
    tmp = path + ".tmp.npy"
    with open(tmp, "wb") as fh:
        np.save(fh, np.ascontiguousarray(array, dtype="<f4"))
    os.replace(tmp, path)


def _atomic_save_image(path, pil_image) -> None:
    tmp = path + ".tmp.png"
    pil_image.save(tmp, format="PNG")
    os.replace(tmp, path)


def write_sample(
    directory,
    sample_id: str,
    image,
    attention: np.ndarray,
    features: np.ndarray,
    gt_mask=None,
    gt_boxes=None,
) -> dict:
    """Write one sample's files; returns its manifest entry."""
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, sample_id)
    n, heads = attention.shape
    f_heads, f_n, dim = features.shape
    assert (f_heads, f_n) == (heads, n), "attention/feature shapes disagree"
    width, height = image.size
    patch = int(round((width * height / n) ** 0.5))
    assert (width // patch) * (height // patch) == n

    _atomic_save_image(base + ".image.png", image)
    _atomic_save_npy(base + ".attn.npy", attention)
    _atomic_save_npy(base + ".feat.npy", features)
    if gt_mask is not None:
        _atomic_save_image(base + ".gt_mask.png", gt_mask)
    if gt_boxes is not None:
        tmp = base + ".gt_boxes.json.tmp"
        with open(tmp, "w") as fh:
            json.dump([list(map(int, b)) for b in gt_boxes], fh)
        os.replace(tmp, base + ".gt_boxes.json")

    return {
        "sample_id": sample_id,
        "width_px": width,
        "height_px": height,
        "patch_size": patch,
        "heads": int(heads),
        "dim_per_head": int(dim),
        "has_gt_mask": gt_mask is not None,
        "has_gt_boxes": gt_boxes is not None,
    }


def write_manifest(directory, entries: list[dict]) -> None:
    payload = {
        "format": FORMAT,
        "samples": sorted(entries, key=lambda e: e["sample_id"]),
    }
    tmp = os.path.join(directory, MANIFEST + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(directory, MANIFEST))
