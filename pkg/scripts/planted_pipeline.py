#!/usr/bin/env python3
"""Run the whole pipeline on a planted synthetic dataset and print the
resulting scores. Everything goes through the CLI, so this doubles as a
quick end-to-end smoke run.

Usage: python scripts/planted_pipeline.py [workdir] [--n 200]
"""

import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

from backloc.cli import main as cli


def run(args):
    work = Path(args.workdir or tempfile.mkdtemp(prefix="backloc_planted_"))
    dataset = work / "dataset"
    trained = work / "trained"
    pred = work / "pred"
    evald = work / "eval"

    t0 = time.perf_counter()
    steps = [
        ["make-fixtures", "--out", str(dataset), "--n", str(args.n)],
        ["train", "--dataset", str(dataset), "--out", str(trained)],
        ["infer", "--dataset", str(dataset), "--checkpoint",
         str(trained / "head.ckpt"), "--out", str(pred), "--mode", "multi"],
        ["eval", "--dataset", str(dataset), "--pred", str(pred), "--out", str(evald)],
    ]
    for step in steps:
        print(f"$ backloc {' '.join(step)}")
        code = cli(step)
        if code != 0:
            return code

    report = json.loads((evald / "report.json").read_text())
    log = [json.loads(l) for l in (trained / "train_log.jsonl").read_text().splitlines()]
    print()
    print(f"workdir          {work}")
    print(f"wall time        {time.perf_counter() - t0:.0f}s")
    print(f"loss iter 0      {log[0]['loss']:.4f}")
    print(f"loss iter -1     {log[-1]['loss']:.6f}")
    print(f"saliency Acc     {report['saliency']['acc']:.3f}")
    print(f"saliency IoU     {report['saliency']['iou']:.3f}")
    print(f"saliency maxFb   {report['saliency']['max_f_beta']:.3f}")
    print(f"CorLoc           {report['corloc']['score']:.3f}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("workdir", nargs="?", default=None)
    parser.add_argument("--n", type=int, default=200)
    sys.exit(run(parser.parse_args()))
