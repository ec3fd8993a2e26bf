"""Bridge command line: extract shards, attach ground truth, generate
test images."""

from __future__ import annotations

import argparse
import json
import sys

from .extract import ExtractConfig, extract
from .gt import convert_gt
from .testimages import write_photos


def build_parser():
    parser = argparse.ArgumentParser(
        prog="shard-bridge",
        description="Run a frozen ViT-S/8 over images and write shards",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--augmentation", choices=["none", "train"], default="none")
    p.add_argument("--views-per-image", type=int, default=1)
    p.add_argument("--feature-source", default="keys-last-layer",
                   choices=["keys-last-layer", "tokens-last-layer"])
    p.add_argument("--checkpoint", default=None,
                   help="pretrained backbone weights; omit for a seeded "
                        "random backbone (offline testing)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("convert-gt")
    p.add_argument("--images", required=True)
    p.add_argument("--shards", required=True)
    p.add_argument("--masks", default=None)
    p.add_argument("--boxes", default=None)

    p = sub.add_parser("make-images")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract":
            cfg = ExtractConfig(
                image_size=args.image_size,
                augmentation=args.augmentation,
                views_per_image=args.views_per_image,
                feature_source=args.feature_source,
                checkpoint=args.checkpoint,
                seed=args.seed,
            )
            summary = extract(args.images, args.out, cfg)
            print(json.dumps(
                {"n_samples": len(summary["samples"]),
                 "skipped": summary["skipped"]}, indent=1))
        elif args.command == "convert-gt":
            summary = convert_gt(args.images, args.shards,
                                 masks_dir=args.masks, boxes_dir=args.boxes)
            print(json.dumps(summary, indent=1))
        elif args.command == "make-images":
            paths = write_photos(args.out, args.n, seed=args.seed, size=args.size)
            print(f"wrote {len(paths)} images to {args.out}")
        return 0
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
