#!/usr/bin/env python3
"""Measure head forward + upsample + connected components throughput on
a 60x60 patch grid, across pixel scales, with BLAS pinned to one thread.

Usage: python scripts/throughput_bench.py [--reps 400]
"""

import argparse
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from backloc.head import SegHeadParams, forward
from backloc.pipeline import connected_components, upsample
from backloc.shards import PatchGrid, binarize


def run(args):
    rng = np.random.default_rng(5)
    feats = rng.standard_normal((3600, 384))
    params = SegHeadParams(weight=rng.standard_normal(384), bias=0.05)

    print(f"{'patch':>6} {'pixels':>10} {'ms/mask':>9} {'masks/s':>9}")
    with threadpool_limits(limits=1):
        for patch in (1, 2, 4, 8):
            grid = PatchGrid(60 * patch, 60 * patch, patch)

            def one():
                soft = forward(params, feats, grid)
                up = upsample(soft, grid)
                return connected_components(binarize(up, 0.5))

            one()  # warm caches
            start = time.perf_counter()
            for _ in range(args.reps):
                one()
            dt = (time.perf_counter() - start) / args.reps
            print(
                f"{patch:>6} {grid.width_px}x{grid.height_px:>5} "
                f"{dt * 1e3:9.3f} {1 / dt:9.0f}"
            )
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--reps", type=int, default=400)
    sys.exit(run(parser.parse_args()))
