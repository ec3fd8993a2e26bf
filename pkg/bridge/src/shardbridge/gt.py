"""Dataset ground-truth adapters: normalize external masks/boxes to the
shard contract at the extraction resolution.

Supported layouts:
  * masks:  a directory of grayscale PNGs named like the images
            (value >= 128 means foreground);
  * boxes:  a directory of per-image JSON files, each a list of
            [xmin, ymin, xmax, ymax] inclusive pixel coordinates in the
            original image frame.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .writer import MANIFEST


def _resize_mask(mask: Image.Image, size: int) -> Image.Image:
    binary = np.asarray(mask.convert("L"), dtype=np.uint8) >= 128
    pil = Image.fromarray((binary * 255).astype(np.uint8))
    return pil.resize((size, size), Image.NEAREST)


def _scale_boxes(boxes, src_w, src_h, size):
    sx = size / src_w
    sy = size / src_h
    out = []
    for xmin, ymin, xmax, ymax in boxes:
        x0 = int(np.clip(np.floor(xmin * sx), 0, size - 1))
        y0 = int(np.clip(np.floor(ymin * sy), 0, size - 1))
        x1 = int(np.clip(np.ceil((xmax + 1) * sx) - 1, x0, size - 1))
        y1 = int(np.clip(np.ceil((ymax + 1) * sy) - 1, y0, size - 1))
        out.append([x0, y0, x1, y1])
    return out


def convert_gt(images_dir, shard_dir, masks_dir=None, boxes_dir=None) -> dict:
    """Attach ground truth to an already extracted shard directory.

    Only samples extracted without augmentation can take ground truth
    (augmented views have no aligned annotation). Images lacking an
    annotation file keep their GT fields absent and are reported.
    """
    if masks_dir is None and boxes_dir is None:
        raise ValueError(
            "no annotation source given; supported layouts: masks directory "
            "of PNGs, boxes directory of JSON lists"
        )
    manifest_path = os.path.join(shard_dir, MANIFEST)
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    updated, missing = [], []
    for entry in manifest["samples"]:
        sid = entry["sample_id"]
        if ".v" in sid:
            raise ValueError(
                f"sample {sid} is an augmented view; ground truth can only "
                "be attached to augmentation-free extractions"
            )
        size = entry["width_px"]
        base = os.path.join(shard_dir, sid)
        image_path = _find_image(images_dir, sid)
        with Image.open(image_path) as im:
            src_w, src_h = im.size

        found_any = False
        if masks_dir is not None:
            mask_path = os.path.join(masks_dir, sid + ".png")
            if os.path.exists(mask_path):
                with Image.open(mask_path) as mask:
                    _resize_mask(mask, size).save(base + ".gt_mask.png")
                entry["has_gt_mask"] = True
                found_any = True
        if boxes_dir is not None:
            box_path = os.path.join(boxes_dir, sid + ".json")
            if os.path.exists(box_path):
                with open(box_path) as fh:
                    boxes = json.load(fh)
                scaled = _scale_boxes(boxes, src_w, src_h, size)
                if scaled:
                    with open(base + ".gt_boxes.json", "w") as fh:
                        json.dump(scaled, fh)
                    entry["has_gt_boxes"] = True
                    found_any = True
        if found_any:
            updated.append(sid)
        else:
            missing.append(sid)

    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return {"updated": updated, "without_gt": missing}


def _find_image(images_dir, stem):
    for name in os.listdir(images_dir):
        if os.path.splitext(name)[0] == stem:
            return os.path.join(images_dir, name)
    raise FileNotFoundError(f"no source image for sample {stem} in {images_dir}")
