"""Single linear-unit segmentation head and its self-training loop.

The head compresses each patch feature to one logit; a sigmoid turns it
into a foreground probability. Training minimizes binary cross entropy
against two pseudo-label streams: the edge-refined complement of the
coarse background mask (replaced after ``m_switch`` iterations by the
prediction's own binarization, to keep the head from collapsing), and
the edge-refined binarization of the prediction itself, gated by IoU
agreement. Optimization is plain AdamW with a stepped learning-rate
decay.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import bilateral
from .background import DiscoveryConfig, discover
from .errors import ConfigError, DataError, NumericalError
from .evalmetrics import mask_iou
from .npyio import read_tensor_from, write_tensor_to
from .resample import downsample_majority, upsample
from .shards import (
    BinaryMask,
    PatchGrid,
    Shard,
    SoftMask,
    binarize,
    list_samples,
    load_png_mask,
    load_shard,
)

BINARIZE_THRESHOLD = 0.5  # gating and self-target binarization


@dataclass(frozen=True)
class AdamWParams:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2


@dataclass(frozen=True)
class TrainConfig:
    lambda_mix: float = 1.5
    m_switch: int = 100
    iters: int = 500
    batch: int = 50
    lr: float = 5e-2
    lr_decay: float = 0.95
    lr_decay_every: int = 50
    iou_gate: float = 0.5
    optimizer: AdamWParams = field(default_factory=AdamWParams)
    seed: int = 0

    def __post_init__(self):
        if self.lambda_mix < 0:
            raise ConfigError(f"lambda_mix must be >= 0, got {self.lambda_mix}")
        if not 0.0 < self.iou_gate < 1.0:
            raise ConfigError(f"iou_gate must lie in (0, 1), got {self.iou_gate}")
        if self.iters > 0 and not 0 <= self.m_switch < self.iters:
            raise ConfigError(
                f"m_switch ({self.m_switch}) must be below iters ({self.iters})"
            )
        if self.batch < 1 or self.lr <= 0:
            raise ConfigError("batch must be >= 1 and lr positive")
        if not 0.0 < self.lr_decay <= 1.0 or self.lr_decay_every < 1:
            raise ConfigError("invalid learning-rate schedule")


@dataclass(frozen=True)
class SegHeadParams:
    weight: np.ndarray  # (in_dim,)
    bias: float

    def __post_init__(self):
        if self.weight.ndim != 1:
            raise DataError("head weight must be a vector")
        if not (np.all(np.isfinite(self.weight)) and np.isfinite(self.bias)):
            raise DataError("head parameters must be finite")

    @property
    def in_dim(self) -> int:
        return len(self.weight)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weight, [self.bias]])

    @staticmethod
    def from_flat(values: np.ndarray) -> "SegHeadParams":
        return SegHeadParams(weight=values[:-1].copy(), bias=float(values[-1]))


@dataclass(frozen=True)
class OptimizerState:
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    step: int

    @staticmethod
    def zeros(n: int) -> "OptimizerState":
        return OptimizerState(np.zeros(n), np.zeros(n), 0)


def init_head(in_dim: int, rng: np.random.Generator) -> SegHeadParams:
    bound = 1.0 / np.sqrt(in_dim)
    return SegHeadParams(weight=rng.uniform(-bound, bound, in_dim), bias=0.0)


def head_features(shard: Shard) -> np.ndarray:
    """Per-patch input features for the head: heads concatenated, (N, h*d)."""
    return shard.features.concat().astype(np.float64)


def logits(params: SegHeadParams, features: np.ndarray) -> np.ndarray:
    if features.ndim != 2 or features.shape[1] != params.in_dim:
        raise DataError(
            f"features {features.shape} do not match head input dim {params.in_dim}"
        )
    return features @ params.weight + params.bias


def forward(params: SegHeadParams, features: np.ndarray, grid: PatchGrid) -> SoftMask:
    """Per-patch foreground probability sigmoid(w . f + b)."""
    z = logits(params, features)
    return SoftMask("patch", expit(z).reshape(grid.rows, grid.cols))


def bce_loss(z: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy in logit space plus its logit gradient.

    loss = -mean_p [t_p log s(z_p) + (1 - t_p) log(1 - s(z_p))], computed
    in the overflow-safe form; the gradient wrt z_p is (s(z_p) - t_p) / N.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if z.shape != t.shape:
        raise DataError(f"logits {z.shape} and targets {t.shape} differ in shape")
    per_patch = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = (expit(z) - t) / len(z)
    return float(per_patch.mean()), grad


@dataclass(frozen=True)
class TargetBundle:
    target_f: BinaryMask | None
    target_s: BinaryMask | None
    gate_pass: bool
    f_source: str  # "refined-coarse" | "self-binarize"
    f_degenerate: bool


def refine_coarse(
    shard: Shard,
    coarse_fg: BinaryMask,
    bs: bilateral.SolverParams,
    refiner: bilateral.Refiner | None = None,
) -> BinaryMask:
    """Edge-refine a patch-resolution coarse mask through image space.

    Upsample to pixel resolution, smooth with the bilateral solver at
    confidence 1, binarize, and vote back down to patch resolution.
    """
    if refiner is None:
        refiner = bilateral.Refiner(shard.image, bs)
    soft = SoftMask("patch", coarse_fg.values.astype(np.float64))
    refined_pixel = refiner.refine(upsample(soft, shard.grid))
    return downsample_majority(refined_pixel, shard.grid)


def make_targets(
    shard: Shard,
    coarse_fg: BinaryMask,
    pred: SoftMask,
    iteration: int,
    cfg: TrainConfig,
    bs: bilateral.SolverParams,
    refined_coarse: BinaryMask | None = None,
    refiner: bilateral.Refiner | None = None,
) -> TargetBundle:
    """Assemble the two pseudo-label targets for one sample.

    Before ``m_switch`` the first target is the edge-refined coarse mask
    (skipped and flagged when it degenerates to all background or all
    foreground); afterwards it is the prediction's own binarization,
    without the solver. The second target is the refined binarization of
    the prediction, present only when it agrees with the raw
    binarization above the IoU gate. ``refined_coarse`` and ``refiner``
    are optional precomputed caches; results are identical without them.
    """
    if refiner is None:
        refiner = bilateral.Refiner(shard.image, bs)
    pred_bin = binarize(pred, BINARIZE_THRESHOLD)

    refined_pred = refiner.refine(upsample(pred, shard.grid))
    target_s_candidate = downsample_majority(refined_pred, shard.grid)
    # two empty masks carry no agreement signal; letting them pass the
    # gate would teach the head that an empty prediction is consistent
    if not pred_bin.values.any() and not target_s_candidate.values.any():
        gate_pass = False
    else:
        gate_pass = mask_iou(pred_bin, target_s_candidate) > cfg.iou_gate
    target_s = target_s_candidate if gate_pass else None

    f_degenerate = False
    if iteration < cfg.m_switch:
        f_source = "refined-coarse"
        if refined_coarse is None:
            refined_coarse = refine_coarse(shard, coarse_fg, bs, refiner)
        filled = int(refined_coarse.values.sum())
        if filled == 0 or filled == refined_coarse.values.size:
            target_f = None
            f_degenerate = True
        else:
            target_f = refined_coarse
    else:
        f_source = "self-binarize"
        target_f = pred_bin

    return TargetBundle(
        target_f=target_f,
        target_s=target_s,
        gate_pass=gate_pass,
        f_source=f_source,
        f_degenerate=f_degenerate,
    )


def total_loss(
    z: np.ndarray,
    target_f: BinaryMask | None,
    target_s: BinaryMask | None,
    lambda_mix: float,
) -> tuple[float, np.ndarray] | None:
    """Combined loss for one sample; None when no target contributes."""
    if target_f is None and target_s is None:
        return None
    loss = 0.0
    grad = np.zeros(np.asarray(z).size)
    if target_f is not None:
        lf, gf = bce_loss(z, target_f.values)
        loss += lf
        grad = grad + gf
    if target_s is not None:
        ls, gs = bce_loss(z, target_s.values)
        loss += lambda_mix * ls
        grad = grad + lambda_mix * gs
    return loss, grad


def adamw_step(
    values: np.ndarray,
    state: OptimizerState,
    grads: np.ndarray,
    lr: float,
    hp: AdamWParams,
) -> tuple[np.ndarray, OptimizerState]:
    """One AdamW update: bias-corrected moments, decoupled weight decay."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != values.shape:
        raise DataError(f"gradient shape {grads.shape} != parameter shape {values.shape}")
    bad = ~np.isfinite(grads)
    if bad.any():
        raise NumericalError(
            f"non-finite gradient at parameter index {int(np.nonzero(bad)[0][0])}"
        )
    step = state.step + 1
    exp_avg = hp.beta1 * state.exp_avg + (1.0 - hp.beta1) * grads
    exp_avg_sq = hp.beta2 * state.exp_avg_sq + (1.0 - hp.beta2) * grads**2
    corrected_avg = exp_avg / (1.0 - hp.beta1**step)
    corrected_sq = exp_avg_sq / (1.0 - hp.beta2**step)
    new_values = (
        values
        - lr * corrected_avg / (np.sqrt(corrected_sq) + hp.eps)
        - lr * hp.weight_decay * values
    )
    return new_values, OptimizerState(exp_avg, exp_avg_sq, step)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ConfigError("iteration must be >= 0")
    return cfg.lr * cfg.lr_decay ** (iteration // cfg.lr_decay_every)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class _TrainItem:
    sample_id: str
    grid: PatchGrid
    features: np.ndarray
    coarse_fg: BinaryMask
    refined_coarse: BinaryMask
    refiner: bilateral.Refiner
    shard: Shard


@dataclass(frozen=True)
class TrainResult:
    params: SegHeadParams
    log: list
    in_dim: int


class _EpochSampler:
    """Without-replacement batches, reshuffling at each epoch boundary."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(k - len(out), self.n - self.pos)
            out.extend(self.order[self.pos : self.pos + take].tolist())
            self.pos += take
        return out


def _load_items(dataset_dir, disc, bs, coarse_source) -> list[_TrainItem]:
    items = []
    for sid in list_samples(dataset_dir):
        shard = load_shard(dataset_dir, sid)
        if coarse_source is None:
            fg, _, _ = discover(shard, disc)
        else:
            path = os.path.join(coarse_source, sid + ".png")
            if not os.path.exists(path):
                raise DataError(f"external coarse mask missing for {sid}: {path}")
            fg = load_png_mask(path, resolution="patch")
            if fg.values.shape != (shard.grid.rows, shard.grid.cols):
                raise DataError(
                    f"coarse mask {fg.values.shape} for {sid} does not match "
                    f"patch grid {shard.grid.rows}x{shard.grid.cols}"
                )
        refiner = bilateral.Refiner(shard.image, bs)
        refined = refine_coarse(shard, fg, bs, refiner)
        items.append(
            _TrainItem(
                sample_id=sid,
                grid=shard.grid,
                features=head_features(shard),
                coarse_fg=fg,
                refined_coarse=refined,
                refiner=refiner,
                shard=shard,
            )
        )
    return items


def train(
    dataset_dir,
    cfg: TrainConfig,
    disc: DiscoveryConfig | None = None,
    bs: bilateral.SolverParams | None = None,
    coarse_source: str | None = None,
) -> TrainResult:
    """Self-train the head on a shard directory.

    Deterministic for a fixed seed: batches, initialization and gradient
    accumulation all follow one seeded generator in a fixed order. The
    returned log holds one record per iteration.
    """
    disc = disc or DiscoveryConfig()
    bs = bs or bilateral.SolverParams()
    items = _load_items(dataset_dir, disc, bs, coarse_source)
    if not items:
        raise DataError(f"no samples in dataset {dataset_dir}")
    in_dim = items[0].features.shape[1]
    for item in items:
        if item.features.shape[1] != in_dim:
            raise DataError(f"inconsistent feature dim in sample {item.sample_id}")

    rng = np.random.default_rng(cfg.seed)
    params = init_head(in_dim, rng)
    state = OptimizerState.zeros(in_dim + 1)
    sampler = _EpochSampler(len(items), rng)
    log = []

    for iteration in range(cfg.iters):
        lr = lr_at(iteration, cfg)
        batch = sampler.take(cfg.batch)

        grad_f = np.zeros(in_dim + 1)
        grad_s = np.zeros(in_dim + 1)
        loss_f_sum = loss_s_sum = 0.0
        n_f = n_s = n_degenerate = 0
        f_source = "refined-coarse" if iteration < cfg.m_switch else "self-binarize"

        for idx in batch:
            item = items[idx]
            z = logits(params, item.features)
            pred = SoftMask(
                "patch", expit(z).reshape(item.grid.rows, item.grid.cols)
            )
            bundle = make_targets(
                item.shard,
                item.coarse_fg,
                pred,
                iteration,
                cfg,
                bs,
                refined_coarse=item.refined_coarse,
                refiner=item.refiner,
            )
            if bundle.f_degenerate:
                n_degenerate += 1
            if bundle.target_f is not None:
                lf, gf = bce_loss(z, bundle.target_f.values)
                loss_f_sum += lf
                grad_f[:-1] += item.features.T @ gf
                grad_f[-1] += gf.sum()
                n_f += 1
            if bundle.target_s is not None:
                ls, gs = bce_loss(z, bundle.target_s.values)
                loss_s_sum += ls
                grad_s[:-1] += item.features.T @ gs
                grad_s[-1] += gs.sum()
                n_s += 1

        if n_f == 0 and n_s == 0:
            raise DataError(
                f"iteration {iteration}: every batch item degenerate, nothing to fit"
            )
        loss_f = loss_f_sum / n_f if n_f else None
        loss_s = loss_s_sum / n_s if n_s else None
        grad = np.zeros(in_dim + 1)
        if n_f:
            grad += grad_f / n_f
        if n_s:
            grad += cfg.lambda_mix * grad_s / n_s
        total = (loss_f or 0.0) + cfg.lambda_mix * (loss_s or 0.0)

        flat, state = adamw_step(params.flat(), state, grad, lr, cfg.optimizer)
        params = SegHeadParams.from_flat(flat)

        log.append(
            {
                "iter": iteration,
                "lr": lr,
                "loss": total,
                "loss_f": loss_f,
                "loss_s": loss_s,
                "n_f": n_f,
                "n_s": n_s,
                "gate_pass_rate": n_s / len(batch),
                "target_f_source": f_source,
                "skipped_f": n_degenerate,
            }
        )

    return TrainResult(params=params, log=log, in_dim=in_dim)


# ---------------------------------------------------------------------------
# checkpoint format: one JSON header line, then an NPY payload of [w..., b]

def save_head(path, params: SegHeadParams, config_hash: str = "", iteration: int = 0) -> None:
    header = {
        "in_dim": params.in_dim,
        "config_hash": config_hash,
        "iteration": iteration,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        write_tensor_to(fh, params.flat())


def load_head(path) -> tuple[SegHeadParams, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        flat = read_tensor_from(fh).astype(np.float64)
    if len(flat) != header["in_dim"] + 1:
        raise DataError(
            f"checkpoint payload has {len(flat)} values, expected "
            f"{header['in_dim'] + 1}"
        )
    return SegHeadParams.from_flat(flat), header
