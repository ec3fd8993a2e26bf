"""Cross-component contract: shards written by this bridge feed the
consumer engine through its public CLI with zero validation errors, the
discovered foreground is non-degenerate, and a short training run on a
50-image set makes progress.
"""

import json
import subprocess

import numpy as np
import pytest

from conftest import primary_cli, primary_env
from shardbridge.extract import ExtractConfig, extract
from shardbridge.testimages import write_photos


def run_primary(*args):
    return subprocess.run(
        primary_cli(*args), env=primary_env(), capture_output=True, text=True
    )


@pytest.fixture(scope="module")
def five_real_shards(photo_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("contract_shards")
    summary = extract(photo_dir, out, ExtractConfig(seed=4))
    assert len(summary["samples"]) >= 5
    return out


def test_consumer_loads_and_discovers(five_real_shards, tmp_path):
    out = tmp_path / "disc"
    proc = run_primary(
        "discover", "--dataset", str(five_real_shards), "--out", str(out)
    )
    assert proc.returncode == 0, proc.stderr
    fractions = []
    for path in sorted(out.glob("*.seed.json")):
        record = json.loads(path.read_text())
        fractions.append(record["foreground_fraction"])
    assert len(fractions) >= 5
    for frac in fractions:
        assert 0.02 < frac < 0.98, f"degenerate foreground fraction {frac}"


def test_consumer_shape_checks_reject_tampering(five_real_shards, tmp_path):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(five_real_shards, broken)
    attn = np.load(broken / "photo000.attn.npy")
    np.save(broken / "photo000.attn.npy", attn[:100])
    proc = run_primary("discover", "--dataset", str(broken), "--out", str(tmp_path / "o"))
    assert proc.returncode == 3
    assert "does not match" in proc.stderr


@pytest.mark.slow
def test_training_loss_decreases_on_fifty_images(tmp_path):
    images = tmp_path / "images"
    write_photos(images, 50, seed=11, size=256)
    shards = tmp_path / "shards"
    extract(images, shards, ExtractConfig(seed=11))

    trained = tmp_path / "trained"
    proc = run_primary(
        "train", "--dataset", str(shards), "--out", str(trained),
        "--iters", "120", "--m-switch", "100", "--batch", "10",
    )
    assert proc.returncode == 0, proc.stderr
    records = [json.loads(l) for l in (trained / "train_log.jsonl").read_text().splitlines()]
    losses = [r["loss"] for r in records[:100]]  # first hundred iterations
    smoothed = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smoothed[-1] < smoothed[0], (
        f"smoothed loss did not decrease: {smoothed[0]:.4f} -> {smoothed[-1]:.4f}"
    )
