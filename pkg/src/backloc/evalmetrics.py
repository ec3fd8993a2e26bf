"""Localization, saliency, and retrieval metrics.

All dataset-level scores accumulate integer counters per image, so
parallel map-reduce aggregation is exact and order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .shards import BBox, BinaryMask

BETA_SQ = 0.3
N_THRESHOLDS = 255  # binarization thresholds 0..254 on the [0, 255] scale


def box_iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two inclusive-coordinate boxes."""
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin) + 1
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


@dataclass(frozen=True)
class CorLocResult:
    score: float
    n_evaluated: int
    n_skipped_no_gt: int
    n_exact_ties: int  # pairs landing exactly on the 0.5 boundary


def corloc(preds: list[list[BBox]], gts: list[list[BBox]]) -> CorLocResult:
    """Fraction of images where some predicted box overlaps some ground
    truth box with IoU strictly above 0.5.

    Images without ground-truth boxes are excluded from the denominator
    and reported. Exact-0.5 pairs do not count and are flagged.
    """
    if len(preds) != len(gts):
        raise DataError(f"prediction/gt list length mismatch: {len(preds)} vs {len(gts)}")
    hits = evaluated = skipped = ties = 0
    for pred_boxes, gt_boxes in zip(preds, gts):
        if not gt_boxes:
            skipped += 1
            continue
        evaluated += 1
        best = 0.0
        for p in pred_boxes:
            for g in gt_boxes:
                iou = box_iou(p, g)
                if iou == 0.5:
                    ties += 1
                best = max(best, iou)
        if best > 0.5:
            hits += 1
    if evaluated == 0:
        raise DataError("no image has ground-truth boxes")
    return CorLocResult(hits / evaluated, evaluated, skipped, ties)


def pixel_accuracy(pred: BinaryMask, gt: BinaryMask) -> float:
    if pred.values.shape != gt.values.shape:
        raise DataError(
            f"mask shape mismatch: {pred.values.shape} vs {gt.values.shape}"
        )
    return float(np.mean(pred.values == gt.values))


def mask_iou(pred: BinaryMask, gt: BinaryMask) -> float:
    """Foreground IoU; two empty masks agree perfectly (IoU 1)."""
    if pred.values.shape != gt.values.shape:
        raise DataError(
            f"mask shape mismatch: {pred.values.shape} vs {gt.values.shape}"
        )
    a = pred.values.astype(bool)
    b = gt.values.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass(frozen=True)
class SaliencyScores:
    acc: float
    iou: float
    max_f_beta: float
    optimal_threshold: int
    beta_sq: float = BETA_SQ
    n_both_empty: int = 0  # image pairs where pred and gt are both empty


@dataclass
class FBetaAccumulator:
    """Aggregated per-threshold TP/FP and foreground count.

    Addition merges two accumulators, so splitting a dataset across
    workers and summing gives exactly the sequential result.
    """

    tp: np.ndarray = field(default_factory=lambda: np.zeros(N_THRESHOLDS, np.int64))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(N_THRESHOLDS, np.int64))
    n_fg: int = 0

    def add_image(self, soft255: np.ndarray, gt: BinaryMask) -> None:
        values = np.asarray(soft255)
        if values.shape != gt.values.shape:
            raise DataError(
                f"soft mask shape {values.shape} does not match gt {gt.values.shape}"
            )
        if values.min() < 0 or values.max() > 255:
            raise DataError("soft prediction must lie within [0, 255]")
        quantized = values.astype(np.int64) if values.dtype.kind in "iu" else np.floor(
            values
        ).astype(np.int64)
        quantized = np.clip(quantized, 0, 255)
        fg = gt.values.astype(bool)
        hist_fg = np.bincount(quantized[fg], minlength=256)
        hist_all = np.bincount(quantized.ravel(), minlength=256)
        # count of pixels with value strictly above each threshold t=0..254
        above_fg = np.cumsum(hist_fg[::-1])[::-1]
        above_all = np.cumsum(hist_all[::-1])[::-1]
        self.tp += above_fg[1:]
        self.fp += (above_all - above_fg)[1:]
        self.n_fg += int(fg.sum())

    def __add__(self, other: "FBetaAccumulator") -> "FBetaAccumulator":
        return FBetaAccumulator(self.tp + other.tp, self.fp + other.fp, self.n_fg + other.n_fg)

    def resolve(self, beta_sq: float = BETA_SQ) -> tuple[float, int]:
        """Best F over the dataset-wide threshold sweep and its argmax
        (lowest threshold on ties)."""
        if self.n_fg == 0:
            raise DataError("max F is undefined: ground truth is empty everywhere")
        tp = self.tp.astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            precision = np.where(tp + self.fp > 0, tp / (tp + self.fp), 0.0)
            recall = tp / self.n_fg
            denom = beta_sq * precision + recall
            f = np.where(denom > 0, (1 + beta_sq) * precision * recall / denom, 0.0)
        best = int(np.argmax(f))  # first occurrence = lowest threshold
        return float(f[best]), best


def max_f_beta(
    soft_preds: list[np.ndarray],
    gts: list[BinaryMask],
    beta_sq: float = BETA_SQ,
) -> tuple[float, int]:
    """Dataset-wide maximal F-beta over 255 binarization thresholds.

    ``soft_preds`` are per-image soft masks scaled to [0, 255]; at each
    threshold t a pixel is foreground when its value is strictly above t.
    One optimal threshold is chosen for the whole dataset.
    """
    if len(soft_preds) != len(gts):
        raise DataError("prediction/gt count mismatch")
    acc = FBetaAccumulator()
    for soft, gt in zip(soft_preds, gts):
        acc.add_image(soft, gt)
    return acc.resolve(beta_sq)


def saliency_scores(
    pred_masks: list[BinaryMask],
    soft_preds: list[np.ndarray],
    gts: list[BinaryMask],
    beta_sq: float = BETA_SQ,
) -> SaliencyScores:
    """Acc / IoU / max F over an aligned dataset of predictions."""
    if not (len(pred_masks) == len(soft_preds) == len(gts)):
        raise DataError("prediction/gt count mismatch")
    if not pred_masks:
        raise DataError("empty evaluation set")
    accs = [pixel_accuracy(p, g) for p, g in zip(pred_masks, gts)]
    ious = [mask_iou(p, g) for p, g in zip(pred_masks, gts)]
    both_empty = sum(
        1 for p, g in zip(pred_masks, gts) if p.values.sum() == 0 and g.values.sum() == 0
    )
    f_score, threshold = max_f_beta(soft_preds, gts, beta_sq)
    # fsum keeps the dataset means exactly invariant to image order
    return SaliencyScores(
        acc=math.fsum(accs) / len(accs),
        iou=math.fsum(ious) / len(ious),
        max_f_beta=f_score,
        optimal_threshold=threshold,
        beta_sq=beta_sq,
        n_both_empty=both_empty,
    )


# ---------------------------------------------------------------------------
# semantic segmentation retrieval

@dataclass(frozen=True)
class Prototype:
    """Mean feature vector of one mask region."""

    sample_id: str
    component_id: int
    vector: np.ndarray
    label: int | None = None


@dataclass(frozen=True)
class PrototypeIndex:
    mode: str  # "single-mask" | "per-component"
    prototypes: tuple[Prototype, ...]
    n_skipped_empty: int
    n_skipped_small: int


def build_prototypes(
    masks: dict[str, BinaryMask],
    features: dict[str, np.ndarray],
    mode: str = "single-mask",
    min_component_frac: float = 0.01,
    labels: dict[str, np.ndarray] | None = None,
) -> PrototypeIndex:
    """Mean-pool patch features over mask regions.

    ``mode`` is "single-mask" (whole mask is one region) or
    "per-component" (each connected component is a region; components
    covering less than ``min_component_frac`` of the patch grid are
    dropped; component_id keeps the labeling's index). When per-sample
    ``labels`` class maps are given, each prototype takes the majority
    class over its region (lowest class id on ties).
    """
    if mode not in ("single-mask", "per-component"):
        raise DataError(f"unknown prototype mode {mode!r}")
    from .pipeline import connected_components  # deferred: avoids import cycle

    protos = []
    skipped_empty = skipped_small = 0
    for sid in sorted(masks):
        mask = masks[sid]
        feats = np.asarray(features[sid], dtype=np.float64)
        n = mask.values.size
        if feats.shape[0] != n:
            raise DataError(
                f"sample {sid}: {feats.shape[0]} feature rows for {n} patches"
            )
        if mode == "single-mask":
            regions = [(0, mask.values.astype(bool))] if mask.values.any() else []
            if not regions:
                skipped_empty += 1
        else:
            labeling = connected_components(mask)
            regions = []
            if labeling.count == 0:
                skipped_empty += 1
            for k in range(labeling.count):
                region = labeling.component_mask(k)
                if region.sum() < min_component_frac * n:
                    skipped_small += 1
                    continue
                regions.append((k, region))
        for cid, region in regions:
            flat = region.ravel()
            vector = feats[flat].mean(axis=0)
            label = None
            if labels is not None:
                region_classes = np.asarray(labels[sid]).ravel()[flat]
                counts = np.bincount(region_classes)
                label = int(np.argmax(counts))  # lowest class id wins ties
            protos.append(Prototype(sid, cid, vector, label))
    return PrototypeIndex(mode, tuple(protos), skipped_empty, skipped_small)


@dataclass(frozen=True)
class RetrievalResult:
    miou: float
    per_class_iou: dict
    assignments: dict  # (sample_id, component_id) -> predicted label


def retrieve(
    val_index: PrototypeIndex,
    train_index: PrototypeIndex,
    val_masks: dict[str, BinaryMask],
    val_labels: dict[str, np.ndarray],
    class_set: list[int],
    metric: str = "cosine",
) -> RetrievalResult:
    """Label validation regions by nearest train prototype, score by mIoU.

    Every validation region is painted with its retrieved label; the
    painted class maps are compared against ground truth per class
    (intersection over union aggregated over the dataset), averaged over
    the classes of ``class_set`` that occur at all. Ties in the nearest
    neighbor go to the lowest (sample_id, component_id); the train index
    is sorted internally so insertion order cannot matter.
    """
    if not train_index.prototypes:
        raise DataError("empty train prototype index")
    if any(p.label is None for p in train_index.prototypes):
        raise DataError("train prototypes must be labeled")
    if metric not in ("cosine", "euclidean"):
        raise DataError(f"unknown retrieval metric {metric!r}")
    train = sorted(train_index.prototypes, key=lambda p: (p.sample_id, p.component_id))
    train_vecs = np.stack([p.vector for p in train])

    from .pipeline import connected_components  # deferred: avoids import cycle

    assignments = {}
    painted = {sid: np.zeros(m.values.shape, np.int64) for sid, m in val_masks.items()}
    labelings = {}
    for proto in val_index.prototypes:
        sid = proto.sample_id
        vec = proto.vector
        if metric == "cosine":
            norms = np.linalg.norm(train_vecs, axis=1) * np.linalg.norm(vec)
            with np.errstate(invalid="ignore", divide="ignore"):
                sims = np.where(norms > 0, train_vecs @ vec / norms, -1.0)
            match = train[int(np.argmax(sims))]
        else:
            match = train[int(np.argmin(np.linalg.norm(train_vecs - vec, axis=1)))]
        assignments[(sid, proto.component_id)] = match.label
        if val_index.mode == "single-mask":
            region = val_masks[sid].values.astype(bool)
        else:
            if sid not in labelings:
                labelings[sid] = connected_components(val_masks[sid])
            region = labelings[sid].component_mask(proto.component_id)
        painted[sid][region] = match.label

    inter = {c: 0 for c in class_set}
    union = {c: 0 for c in class_set}
    for sid, pred_map in painted.items():
        gt_map = np.asarray(val_labels[sid])
        if gt_map.shape != pred_map.shape:
            raise DataError(f"class map shape mismatch for sample {sid}")
        for c in class_set:
            p = pred_map == c
            g = gt_map == c
            inter[c] += int(np.logical_and(p, g).sum())
            union[c] += int(np.logical_or(p, g).sum())
    present = [c for c in class_set if union[c] > 0]
    if not present:
        raise DataError("no class from the class set occurs in predictions or gt")
    per_class = {c: inter[c] / union[c] for c in present}
    return RetrievalResult(
        miou=float(np.mean([per_class[c] for c in present])),
        per_class_iou=per_class,
        assignments=assignments,
    )
