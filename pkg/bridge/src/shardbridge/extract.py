"""Image directory to shard directory extraction."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .augment import plain_view, train_view
from .vit import IMAGENET_MEAN, IMAGENET_STD, PATCH, build_backbone
from .writer import write_manifest, write_sample

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass(frozen=True)
class ExtractConfig:
    image_size: int = 224
    augmentation: str = "none"  # "none" | "train"
    views_per_image: int = 1
    feature_source: str = "keys-last-layer"  # or "tokens-last-layer"
    checkpoint: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.image_size % PATCH:
            raise ValueError(f"image size must divide by {PATCH}")
        if self.augmentation not in ("none", "train"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.feature_source not in ("keys-last-layer", "tokens-last-layer"):
            raise ValueError(f"unknown feature source {self.feature_source!r}")
        if self.views_per_image < 1:
            raise ValueError("views_per_image must be >= 1")


def _to_tensor(view: Image.Image) -> torch.Tensor:
    arr = np.asarray(view.convert("RGB"), dtype=np.float32) / 255.0
    arr = (arr - np.array(IMAGENET_MEAN, np.float32)) / np.array(IMAGENET_STD, np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def _features_from(backbone_out, source: str) -> np.ndarray:
    cls_attn, patch_keys, patch_tokens = backbone_out
    if source == "keys-last-layer":
        return patch_keys[0].numpy()  # (heads, N, d)
    n, embed = patch_tokens.shape[1:]
    heads = cls_attn.shape[2]
    # split the final tokens into per-head slabs of embed/heads channels
    return patch_tokens[0].reshape(n, heads, embed // heads).permute(1, 0, 2).numpy()


def list_images(images_dir) -> list[str]:
    names = sorted(
        name
        for name in os.listdir(images_dir)
        if name.lower().endswith(IMAGE_EXTENSIONS)
    )
    return [os.path.join(images_dir, name) for name in names]


def extract(images_dir, out_dir, cfg: ExtractConfig) -> dict:
    """Run the frozen backbone over every image and write shards.

    Undecodable images are skipped and reported; a checkpoint that does
    not match the architecture aborts before any work. Returns a summary
    with sample ids, per-view augmentation records, and skipped files.
    """
    paths = list_images(images_dir)
    if not paths:
        raise FileNotFoundError(f"no images found in {images_dir}")
    backbone = build_backbone(cfg.image_size, cfg.checkpoint, cfg.seed)

    rng = np.random.default_rng(cfg.seed)
    entries = []
    views = {}
    skipped = []
    for path in paths:
        stem = os.path.splitext(os.path.basename(path))[0]
        try:
            with Image.open(path) as raw:
                image = raw.convert("RGB")
        except (UnidentifiedImageError, OSError) as exc:
            skipped.append({"file": path, "reason": str(exc)})
            continue
        n_views = cfg.views_per_image if cfg.augmentation == "train" else 1
        for k in range(n_views):
            if cfg.augmentation == "train":
                view, record = train_view(image, cfg.image_size, rng)
            else:
                view, record = plain_view(image, cfg.image_size)
            sample_id = stem if n_views == 1 else f"{stem}.v{k}"
            out = backbone(_to_tensor(view))
            attention = out[0][0].numpy()  # (N, heads)
            features = _features_from(out, cfg.feature_source)
            entries.append(write_sample(out_dir, sample_id, view, attention, features))
            views[sample_id] = {"scale": record.scale, "blur_sigma": record.blur_sigma}
    if not entries:
        raise FileNotFoundError(f"every image in {images_dir} was undecodable")
    write_manifest(out_dir, entries)
    return {
        "samples": [e["sample_id"] for e in entries],
        "views": views,
        "skipped": skipped,
    }
