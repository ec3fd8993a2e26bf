import json
import os

import numpy as np
import pytest
from PIL import Image

from shardbridge.extract import ExtractConfig, extract
from shardbridge.gt import convert_gt


@pytest.fixture(scope="module")
def extracted(photo_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("gt_shards")
    extract(photo_dir, out, ExtractConfig(seed=0))
    return out


def test_mask_threshold_rule_and_resize(photo_dir, extracted, tmp_path):
    masks = tmp_path / "masks"
    os.makedirs(masks)
    # values straddling 128: >= 128 becomes foreground
    gray = np.zeros((256, 256), np.uint8)
    gray[:128] = 127
    gray[128:] = 128
    Image.fromarray(gray).save(masks / "photo000.png")
    summary = convert_gt(photo_dir, extracted, masks_dir=masks)
    assert "photo000" in summary["updated"]
    stored = np.asarray(Image.open(extracted / "photo000.gt_mask.png").convert("L"))
    assert stored.shape == (224, 224)
    assert (stored[:112] < 128).all()
    assert (stored[112:] >= 128).all()
    manifest = json.loads((extracted / "manifest.json").read_text())
    entry = [s for s in manifest["samples"] if s["sample_id"] == "photo000"][0]
    assert entry["has_gt_mask"]


def test_boxes_scaled_to_inclusive_coordinates(photo_dir, extracted, tmp_path):
    boxes = tmp_path / "boxes"
    os.makedirs(boxes)
    # full-frame box in a 256-px image maps to the full 224-px frame
    (boxes / "photo001.json").write_text(json.dumps([[0, 0, 255, 255], [64, 64, 127, 127]]))
    summary = convert_gt(photo_dir, extracted, boxes_dir=boxes)
    assert "photo001" in summary["updated"]
    stored = json.loads((extracted / "photo001.gt_boxes.json").read_text())
    assert stored[0] == [0, 0, 223, 223]
    x0, y0, x1, y1 = stored[1]
    assert 0 <= x0 <= x1 <= 223 and 0 <= y0 <= y1 <= 223
    assert x0 == 56 and x1 == 111  # 64*224/256 .. 128*224/256 - 1


def test_images_without_annotation_flagged(photo_dir, extracted, tmp_path):
    masks = tmp_path / "sparse_masks"
    os.makedirs(masks)
    Image.fromarray(np.full((256, 256), 255, np.uint8)).save(masks / "photo002.png")
    summary = convert_gt(photo_dir, extracted, masks_dir=masks)
    assert "photo002" in summary["updated"]
    assert "photo003" in summary["without_gt"]


def test_no_annotation_source_is_error(photo_dir, extracted):
    with pytest.raises(ValueError, match="supported layouts"):
        convert_gt(photo_dir, extracted)


def test_augmented_views_rejected(photo_dir, tmp_path):
    out = tmp_path / "aug"
    extract(photo_dir, out, ExtractConfig(augmentation="train", views_per_image=2, seed=0))
    with pytest.raises(ValueError, match="augmented view"):
        convert_gt(photo_dir, out, masks_dir=str(tmp_path))
