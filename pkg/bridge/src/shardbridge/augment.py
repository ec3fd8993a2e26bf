"""Training-time view augmentation: random rescale, resize, random blur."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageFilter

SCALE_RANGE = (0.1, 3.0)
BLUR_PROB = 0.5
BLUR_SIGMA = (0.1, 2.0)


@dataclass(frozen=True)
class ViewRecord:
    scale: float | None
    blur_sigma: float | None


def train_view(image: Image.Image, size: int, rng: np.random.Generator):
    """One augmented view: rescale by a uniform draw from [0.1, 3.0],
    resize to the target size, Gaussian-blur with probability 0.5."""
    scale = float(rng.uniform(*SCALE_RANGE))
    w = max(1, round(image.width * scale))
    h = max(1, round(image.height * scale))
    out = image.resize((w, h), Image.BILINEAR).resize((size, size), Image.BILINEAR)
    blur = None
    if rng.random() < BLUR_PROB:
        blur = float(rng.uniform(*BLUR_SIGMA))
        out = out.filter(ImageFilter.GaussianBlur(radius=blur))
    return out, ViewRecord(scale=scale, blur_sigma=blur)


def plain_view(image: Image.Image, size: int):
    return image.resize((size, size), Image.BILINEAR), ViewRecord(None, None)
