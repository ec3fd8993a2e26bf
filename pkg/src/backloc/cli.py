"""Command-line entry point tying discovery, training, inference,
evaluation, retrieval, and fixture generation together.

Configuration precedence: built-in defaults, then values from an
optional TOML file (``--config``), then explicit command-line flags.
Every emitted artifact embeds the hash of the effective configuration.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import bilateral, evalmetrics, fixtures, head as head_mod, pipeline
from .background import DiscoveryConfig, discover
from .errors import BacklocError, ConfigError, DataError
from .head import AdamWParams, TrainConfig
from .pipeline import InferenceConfig
from .resample import upsample
from .shards import (
    BBox,
    SoftMask,
    list_samples,
    load_png_mask,
    load_png_soft,
    load_shard,
    save_png_array,
    save_png_mask,
    save_png_soft,
)

log = logging.getLogger("backloc")

JOBS_ENV = "BACKLOC_JOBS"


@dataclasses.dataclass(frozen=True)
class RunConfig:
    discovery: DiscoveryConfig
    train: TrainConfig
    bilateral: bilateral.SolverParams
    inference: InferenceConfig
    jobs: int = 1
    log_level: str = "info"

    def to_dict(self) -> dict:
        return {
            "discovery": dataclasses.asdict(self.discovery),
            "train": dataclasses.asdict(self.train),
            "bilateral": dataclasses.asdict(self.bilateral),
            "inference": dataclasses.asdict(self.inference),
            "run": {"jobs": self.jobs, "log_level": self.log_level},
        }

    def hash(self) -> str:
        """Hash of the semantic configuration; the run section is excluded
        because jobs/logging must never change results."""
        data = self.to_dict()
        del data["run"]
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTION_TYPES = {
    "discovery": DiscoveryConfig,
    "train": TrainConfig,
    "bilateral": bilateral.SolverParams,
    "inference": InferenceConfig,
}


def _build_section(cls, raw: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown option {key!r} for section {cls.__name__}")
        if key == "optimizer":
            value = _build_section(AdamWParams, value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config_file(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for section in raw:
        if section not in (*_SECTION_TYPES, "run"):
            raise ConfigError(f"unknown config section {section!r} in {path}")
    return raw


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    return '"%s"' % str(value).replace("\\", "\\\\").replace('"', '\\"')


def dump_config(cfg: RunConfig, path) -> None:
    """Write the effective configuration as a TOML file that reloads to
    the same RunConfig."""
    lines = []
    data = cfg.to_dict()
    for section in ("discovery", "train", "bilateral", "inference", "run"):
        body = dict(data[section])
        nested = {k: v for k, v in body.items() if isinstance(v, dict)}
        for k in nested:
            del body[k]
        lines.append(f"[{section}]")
        for key, value in body.items():
            lines.append(f"{key} = {_toml_scalar(value)}")
        for sub, subbody in nested.items():
            lines.append(f"[{section}.{sub}]")
            for key, value in subbody.items():
                lines.append(f"{key} = {_toml_scalar(value)}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def config_from_sources(file_raw: dict, flag_values: dict) -> RunConfig:
    """Defaults, overlaid by file values, overlaid by explicit flags.

    ``flag_values`` maps "section.option" to the parsed flag value, with
    None meaning "not given".
    """
    merged = {name: dict(file_raw.get(name, {})) for name in _SECTION_TYPES}
    run_raw = dict(file_raw.get("run", {}))
    for dotted, value in flag_values.items():
        if value is None:
            continue
        section, option = dotted.split(".", 1)
        if section == "run":
            run_raw[option] = value
        else:
            merged[section][option] = value
    try:
        sections = {
            name: _build_section(cls, merged[name])
            for name, cls in _SECTION_TYPES.items()
        }
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    jobs = run_raw.get("jobs")
    if jobs is None:
        jobs = int(os.environ.get(JOBS_ENV, "1"))
    jobs = int(jobs)
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    return RunConfig(
        discovery=sections["discovery"],
        train=sections["train"],
        bilateral=sections["bilateral"],
        inference=sections["inference"],
        jobs=jobs,
        log_level=str(run_raw.get("log_level", "info")),
    )


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(parser):
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--jobs", "-j", type=int, default=None, dest="run_jobs",
                        help=f"per-image parallelism (default from ${JOBS_ENV} or 1)")
    parser.add_argument("--log-level", default=None, dest="run_log_level",
                        choices=["debug", "info", "warning", "error"])
    parser.add_argument("--dump-config", metavar="PATH", default=None,
                        help="write the effective TOML config to PATH and continue")


def _add_discovery_flags(parser):
    parser.add_argument("--tau", type=float, default=None, dest="discovery_tau",
                        help="cosine threshold for background membership")
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--reweight", action="store_true", default=None,
                       dest="discovery_reweight")
    group.add_argument("--no-reweight", action="store_false", default=None,
                       dest="discovery_reweight")


def _add_bilateral_flags(parser):
    for name, typ in [
        ("sigma-spatial", float), ("sigma-luma", float), ("sigma-chroma", float),
        ("lam", float), ("cg-tol", float), ("cg-max-iters", int),
        ("binarize-threshold", float),
    ]:
        parser.add_argument(
            f"--bs.{name}", type=typ, default=None,
            dest="bilateral_" + name.replace("-", "_"),
        )


def _add_train_flags(parser):
    for name, typ in [
        ("lambda-mix", float), ("m-switch", int), ("iters", int), ("batch", int),
        ("lr", float), ("lr-decay", float), ("lr-decay-every", int),
        ("iou-gate", float), ("seed", int),
    ]:
        parser.add_argument(
            f"--{name}", type=typ, default=None,
            dest="train_" + name.replace("-", "_"),
        )


def _add_inference_flags(parser):
    parser.add_argument("--mode", choices=["single", "multi"], default=None,
                        dest="inference_mode")
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--post-bs", action="store_true", default=None,
                       dest="inference_post_bs")
    group.add_argument("--no-post-bs", action="store_false", default=None,
                       dest="inference_post_bs")
    parser.add_argument("--min-component-frac", type=float, default=None,
                        dest="inference_min_component_frac")
    parser.add_argument("--connectivity", type=int, choices=[4, 8], default=None,
                        dest="inference_connectivity")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backloc",
        description="Unsupervised object localization by background discovery",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discover", help="emit coarse foreground masks")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample", action="append", help="restrict to these sample ids")
    p.add_argument("--overlay", action="store_true",
                   help="also write pixel-resolution overlay PNGs")
    _add_common(p)
    _add_discovery_flags(p)

    p = sub.add_parser("train", help="self-train the segmentation head")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--coarse-masks", default=None,
                   help="directory of external patch-resolution coarse masks")
    _add_common(p)
    _add_discovery_flags(p)
    _add_train_flags(p)
    _add_bilateral_flags(p)

    p = sub.add_parser("infer", help="run the trained head over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    _add_inference_flags(p)
    _add_bilateral_flags(p)

    p = sub.add_parser("eval", help="score predictions against shard ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pred", required=True, help="directory written by `infer`")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("retrieve", help="semantic segmentation retrieval")
    p.add_argument("--train-dataset", required=True)
    p.add_argument("--val-dataset", required=True)
    p.add_argument("--train-masks", required=True,
                   help="patch-resolution mask PNGs for the train split")
    p.add_argument("--val-masks", required=True)
    p.add_argument("--train-classes", required=True,
                   help="patch-resolution class-id PNGs for the train split")
    p.add_argument("--val-classes", required=True)
    p.add_argument("--classes", default=None,
                   help="comma-separated class ids to score (default: all in gt)")
    p.add_argument("--proto-mode", choices=["single-mask", "per-component"],
                   default="per-component")
    p.add_argument("--metric", choices=["cosine", "euclidean"], default="cosine")
    p.add_argument("--out", required=True)
    _add_common(p)
    _add_inference_flags(p)

    p = sub.add_parser("make-fixtures", help="generate a planted synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--grid-rows", type=int, default=14)
    p.add_argument("--grid-cols", type=int, default=14)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--heads", type=int, default=6)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-classes", action="store_true")
    _add_common(p)

    return parser


_RUN_OPTIONS = ("jobs", "log_level")


def _effective_config(args) -> RunConfig:
    file_raw = load_config_file(args.config) if getattr(args, "config", None) else {}
    flag_values = {}
    for key, value in vars(args).items():
        for prefix, section in [
            ("discovery_", "discovery"), ("train_", "train"),
            ("bilateral_", "bilateral"), ("inference_", "inference"),
            ("run_", "run"),
        ]:
            if not key.startswith(prefix):
                continue
            option = key[len(prefix):]
            known = (
                _RUN_OPTIONS
                if section == "run"
                else tuple(f.name for f in dataclasses.fields(_SECTION_TYPES[section]))
            )
            if option in known:
                flag_values[f"{section}.{option}"] = value
    cfg = config_from_sources(file_raw, flag_values)
    if getattr(args, "dump_config", None):
        dump_config(cfg, args.dump_config)
    return cfg


def _parallel_map(fn, items, jobs):
    """Apply fn over items, optionally threaded; output order is fixed."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _json_dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_discover(args) -> int:
    cfg = _effective_config(args)
    chash = cfg.hash()
    os.makedirs(args.out, exist_ok=True)
    ids = args.sample or list_samples(args.dataset)

    def one(sid):
        shard = load_shard(args.dataset, sid)
        fg, seed, sparsity = discover(shard, cfg.discovery)
        save_png_mask(os.path.join(args.out, sid + ".fg.png"), fg,
                      text={"config_hash": chash})
        record = {
            "sample_id": sid,
            "seed_index": seed.seed_index,
            "mu": sparsity.threshold_mu,
            "counts": sparsity.counts.tolist(),
            "weights": sparsity.weights.tolist(),
            "foreground_fraction": float(fg.values.mean()),
            "config_hash": chash,
        }
        _json_dump(record, os.path.join(args.out, sid + ".seed.json"))
        if args.overlay:
            soft = SoftMask("patch", fg.values.astype(np.float64))
            up = upsample(soft, shard.grid)
            overlay = shard.image.values.astype(np.float64)
            overlay[..., 0] = np.clip(
                overlay[..., 0] * 0.5 + 127.5 * up.values, 0, 255
            )
            save_png_array(os.path.join(args.out, sid + ".overlay.png"),
                           overlay.astype(np.uint8), {"config_hash": chash})
        return sid

    _parallel_map(one, ids, cfg.jobs)
    log.info("discover: wrote %d masks to %s", len(ids), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    chash = cfg.hash()
    os.makedirs(args.out, exist_ok=True)
    result = head_mod.train(
        args.dataset, cfg.train, cfg.discovery, cfg.bilateral,
        coarse_source=args.coarse_masks,
    )
    ckpt = os.path.join(args.out, "head.ckpt")
    head_mod.save_head(ckpt, result.params, config_hash=chash,
                       iteration=cfg.train.iters)
    with open(os.path.join(args.out, "train_log.jsonl"), "w") as fh:
        for record in result.log:
            record = dict(record, config_hash=chash)
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    log.info("train: %d iterations, checkpoint at %s", cfg.train.iters, ckpt)
    return 0


def cmd_infer(args) -> int:
    cfg = _effective_config(args)
    chash = cfg.hash()
    os.makedirs(args.out, exist_ok=True)
    params, _ = head_mod.load_head(args.checkpoint)
    ids = list_samples(args.dataset)

    def one(sid):
        start = time.perf_counter()
        shard = load_shard(args.dataset, sid)
        result = pipeline.infer(shard, params, cfg.inference, cfg.bilateral)
        save_png_mask(os.path.join(args.out, sid + ".mask.png"), result.mask,
                      text={"config_hash": chash})
        save_png_soft(os.path.join(args.out, sid + ".soft.png"), result.soft,
                      text={"config_hash": chash})
        with open(os.path.join(args.out, sid + ".boxes.json"), "w") as fh:
            json.dump({"config_hash": chash,
                       "boxes": [b.as_list() for b in result.boxes],
                       "degenerate": result.degenerate}, fh, sort_keys=True)
        return sid, time.perf_counter() - start

    timings = _parallel_map(one, ids, cfg.jobs)
    with open(os.path.join(args.out, "timings.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["# config_hash", chash])
        writer.writerow(["sample_id", "seconds"])
        for sid, seconds in timings:
            writer.writerow([sid, f"{seconds:.6f}"])
    log.info("infer: wrote %d masks to %s", len(ids), args.out)
    return 0


def cmd_eval(args) -> int:
    cfg = _effective_config(args)
    chash = cfg.hash()
    manifest_ids = list_samples(args.dataset)

    missing = []
    for sid in manifest_ids:
        for suffix in (".mask.png", ".soft.png", ".boxes.json"):
            if not os.path.exists(os.path.join(args.pred, sid + suffix)):
                missing.append(sid + suffix)
    known = {sid + suffix for sid in manifest_ids
             for suffix in (".mask.png", ".soft.png", ".boxes.json")}
    extras = sorted(
        name for name in os.listdir(args.pred)
        if name.endswith((".mask.png", ".soft.png", ".boxes.json"))
        and name not in known
    )
    if missing or extras:
        raise DataError(
            "prediction/dataset pairing mismatch: "
            f"missing={missing[:5]}{'...' if len(missing) > 5 else ''} "
            f"unexpected={extras[:5]}{'...' if len(extras) > 5 else ''}"
        )

    def one(sid):
        shard = load_shard(args.dataset, sid)
        pred_mask = load_png_mask(os.path.join(args.pred, sid + ".mask.png"))
        soft = load_png_soft(os.path.join(args.pred, sid + ".soft.png"))
        with open(os.path.join(args.pred, sid + ".boxes.json")) as fh:
            pred_boxes = [tuple(b) for b in json.load(fh)["boxes"]]
        return sid, shard, pred_mask, soft, pred_boxes

    rows = _parallel_map(one, manifest_ids, cfg.jobs)

    sal_masks, sal_soft, sal_gt = [], [], []
    box_preds, box_gts = [], []
    n_no_gt_mask = 0
    for sid, shard, pred_mask, soft, pred_boxes in rows:
        if shard.gt_mask is not None:
            if pred_mask.values.shape != shard.gt_mask.values.shape:
                raise DataError(f"prediction for {sid} has wrong resolution")
            sal_masks.append(pred_mask)
            sal_soft.append(np.rint(soft.values * 255).astype(np.int64))
            sal_gt.append(shard.gt_mask)
        else:
            n_no_gt_mask += 1
        if shard.gt_boxes is not None:
            box_preds.append([BBox(*b) for b in pred_boxes])
            box_gts.append(list(shard.gt_boxes))

    report = {"config_hash": chash, "n_images": len(manifest_ids),
              "n_without_gt_mask": n_no_gt_mask}
    lines = []
    if sal_masks:
        scores = evalmetrics.saliency_scores(sal_masks, sal_soft, sal_gt)
        report["saliency"] = {
            "acc": scores.acc, "iou": scores.iou,
            "max_f_beta": scores.max_f_beta, "beta_sq": scores.beta_sq,
            "optimal_threshold": scores.optimal_threshold,
            "n_both_empty": scores.n_both_empty,
            "n_images": len(sal_masks),
        }
        lines.append(f"{'Acc':>8} {'IoU':>8} {'maxFb':>8}")
        lines.append(
            f"{scores.acc:8.3f} {scores.iou:8.3f} {scores.max_f_beta:8.3f}"
        )
    if box_gts:
        cl = evalmetrics.corloc(box_preds, box_gts)
        report["corloc"] = {
            "score": cl.score, "n_evaluated": cl.n_evaluated,
            "n_skipped_no_gt": cl.n_skipped_no_gt,
            "n_exact_ties": cl.n_exact_ties,
        }
        lines.append(f"{'CorLoc':>8}")
        lines.append(f"{cl.score:8.3f}")

    os.makedirs(args.out, exist_ok=True)
    _json_dump(report, os.path.join(args.out, "report.json"))
    with open(os.path.join(args.out, "table.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return 0


def _load_mask_dir(mask_dir, ids, rows, cols):
    masks = {}
    for sid in ids:
        path = os.path.join(mask_dir, sid + ".png")
        if not os.path.exists(path):
            raise DataError(f"mask for sample {sid} missing in {mask_dir}")
        mask = load_png_mask(path, resolution="patch")
        if mask.values.shape != (rows, cols):
            raise DataError(
                f"mask {path} has shape {mask.values.shape}, expected {(rows, cols)}"
            )
        masks[sid] = mask
    return masks


def _load_class_dir(class_dir, ids, rows, cols):
    from PIL import Image

    out = {}
    for sid in ids:
        path = os.path.join(class_dir, sid + ".png")
        if not os.path.exists(path):
            raise DataError(f"class map for sample {sid} missing in {class_dir}")
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.int64)
        if arr.shape != (rows, cols):
            raise DataError(f"class map {path} has shape {arr.shape}")
        out[sid] = arr
    return out


def cmd_retrieve(args) -> int:
    cfg = _effective_config(args)
    chash = cfg.hash()

    def split_inputs(dataset, mask_dir, class_dir):
        ids = list_samples(dataset)
        shards = {sid: load_shard(dataset, sid) for sid in ids}
        any_grid = next(iter(shards.values())).grid
        masks = _load_mask_dir(mask_dir, ids, any_grid.rows, any_grid.cols)
        classes = _load_class_dir(class_dir, ids, any_grid.rows, any_grid.cols)
        feats = {sid: head_mod.head_features(shard) for sid, shard in shards.items()}
        return masks, classes, feats

    train_masks, train_classes, train_feats = split_inputs(
        args.train_dataset, args.train_masks, args.train_classes)
    val_masks, val_classes, val_feats = split_inputs(
        args.val_dataset, args.val_masks, args.val_classes)

    mode = args.proto_mode
    frac = cfg.inference.min_component_frac
    train_index = evalmetrics.build_prototypes(
        train_masks, train_feats, mode=mode, min_component_frac=frac,
        labels=train_classes)
    val_index = evalmetrics.build_prototypes(
        val_masks, val_feats, mode=mode, min_component_frac=frac)

    if args.classes:
        class_set = [int(c) for c in args.classes.split(",")]
    else:
        observed = set()
        for arr in val_classes.values():
            observed.update(np.unique(arr).tolist())
        class_set = sorted(int(c) for c in observed if c != 0)
    result = evalmetrics.retrieve(
        val_index, train_index, val_masks, val_classes, class_set,
        metric=args.metric)

    os.makedirs(args.out, exist_ok=True)
    report = {
        "config_hash": chash,
        "miou": result.miou,
        "per_class_iou": {str(k): v for k, v in result.per_class_iou.items()},
        "n_train_prototypes": len(train_index.prototypes),
        "n_val_prototypes": len(val_index.prototypes),
        "skipped": {
            "train_empty": train_index.n_skipped_empty,
            "train_small": train_index.n_skipped_small,
            "val_empty": val_index.n_skipped_empty,
            "val_small": val_index.n_skipped_small,
        },
    }
    _json_dump(report, os.path.join(args.out, "report.json"))
    lines = [f"{'mIoU':>8}", f"{result.miou:8.3f}"]
    with open(os.path.join(args.out, "table.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_make_fixtures(args) -> int:
    cfg = _effective_config(args)
    fixture_cfg = fixtures.FixtureConfig(
        n_shards=args.n,
        grid_rows=args.grid_rows,
        grid_cols=args.grid_cols,
        patch_size=args.patch_size,
        heads=args.heads,
        dim_per_head=args.dim,
        seed=args.seed,
        with_classes=args.with_classes,
    )
    ids = fixtures.make_planted_dataset(args.out, fixture_cfg)
    _json_dump(
        {"config_hash": cfg.hash(), "n_shards": len(ids), "seed": args.seed},
        os.path.join(args.out, "fixtures.json"),
    )
    log.info("make-fixtures: wrote %d shards to %s", len(ids), args.out)
    return 0


_COMMANDS = {
    "discover": cmd_discover,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "make-fixtures": cmd_make_fixtures,
}


def run(args) -> int:
    level = (getattr(args, "run_log_level", None) or "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    return _COMMANDS[args.command](args)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except BacklocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
