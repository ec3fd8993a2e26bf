"""Deterministic photographic-style test images.

Gradient sky, textured ground, and a few large high-contrast objects
with shading, stripes, and sensor-like noise: enough spatial structure
for a transformer to produce region-dependent features, with no dataset
download. Objects are kept big and contrasty on purpose; the consumer's
background discovery needs feature clusters that actually separate.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

_SKIES = [((96, 140, 200), (200, 220, 240)), ((140, 170, 210), (230, 235, 240))]
_GROUNDS = [(90, 110, 60), (120, 100, 70), (80, 80, 90)]
_OBJECTS = [(220, 50, 40), (250, 210, 40), (20, 20, 25), (250, 250, 245), (130, 30, 180)]


def make_photo(rng: np.random.Generator, size: int = 256) -> Image.Image:
    yy, xx = np.mgrid[:size, :size].astype(np.float64) / size
    top, bottom = _SKIES[rng.integers(0, len(_SKIES))]
    horizon = float(rng.uniform(0.4, 0.6))
    sky = np.array(top) + (np.array(bottom) - np.array(top)) * (yy / horizon)[..., None]
    ground_color = np.array(_GROUNDS[rng.integers(0, len(_GROUNDS))], np.float64)
    texture = rng.normal(0.0, 5.0, (size, size, 1))
    ground = ground_color[None, None] + texture
    image = np.where((yy < horizon)[..., None], sky, ground)

    # every photo gets one big dark and one big bright object in separate
    # halves, plus a random extra; guarantees bimodal feature structure
    placements = [
        (_OBJECTS[2 + int(rng.integers(0, 1))], rng.uniform(0.22, 0.35)),  # dark
        (_OBJECTS[int(rng.integers(0, 2))], rng.uniform(0.65, 0.78)),  # bright
    ]
    if rng.random() < 0.5:
        placements.append(
            (_OBJECTS[int(rng.integers(0, len(_OBJECTS)))], rng.uniform(0.3, 0.7))
        )
    for color, cx in placements:
        color = np.array(color, np.float64)
        cy = float(rng.uniform(0.3, 0.7))
        rx = float(rng.uniform(0.16, 0.28))
        ry = float(rng.uniform(0.16, 0.28))
        ellipse = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1.0
        shading = 1.0 - 0.35 * ((yy - cy) / max(ry, 1e-6)).clip(-1, 1)
        body = color[None, None] * shading[..., None]
        if rng.random() < 0.5:
            stripes = (np.sin(xx * size / 5.0) > 0)[..., None]
            body = np.where(stripes, body * 0.55, body)
        image = np.where(ellipse[..., None], body, image)

    image = image + rng.normal(0.0, 3.0, image.shape)
    return Image.fromarray(np.clip(image, 0, 255).astype(np.uint8))


def write_photos(out_dir, count: int, seed: int = 0, size: int = 256) -> list:
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for k in range(count):
        path = os.path.join(out_dir, f"photo{k:03d}.png")
        make_photo(rng, size).save(path)
        paths.append(path)
    return paths
