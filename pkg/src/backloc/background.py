"""Background discovery from transformer attention and patch features.

The background of an image is found by (1) scoring each attention head
by how sparsely it fires above the mean attention level, (2) mining a
seed patch that receives the least head-weighted attention, and
(3) collecting every patch whose head-weighted concatenated feature is
cosine-similar to the seed. Objects are whatever is left over.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DegenerateSeedError
from .shards import AttentionStack, BinaryMask, FeatureStack, Shard, WeightedFeatures


@dataclass(frozen=True)
class DiscoveryConfig:
    tau: float = 0.3
    reweight: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")


@dataclass(frozen=True)
class HeadSparsity:
    """Supra-threshold counts per head and the log-ratio weights they induce."""

    threshold_mu: float
    counts: np.ndarray  # int, length h, clamped to >= 1
    weights: np.ndarray  # float, length h


@dataclass(frozen=True)
class SeedResult:
    seed_index: int
    weighted_attention: np.ndarray  # length N


def mean_attention_threshold(att: AttentionStack) -> float:
    """Overall mean attention across every patch and head."""
    if att.values.size == 0:
        raise DataError("empty attention stack")
    return float(np.mean(att.values, dtype=np.float64))


def compute_sparsity(att: AttentionStack, mu: float) -> HeadSparsity:
    """Count per head how many attention values reach mu (inclusive).

    Heads with no supra-threshold values are clamped to a count of 1 so
    the log-ratio weight stays defined. Weights are
    ln(sum_j counts_j / counts_i): the emptier a head, the larger its say.
    """
    if not mu > 0:
        raise DataError(f"sparsity threshold must be positive, got {mu}")
    if not np.all(np.isfinite(att.values)):
        raise DataError("attention contains non-finite values")
    counts = np.maximum((att.values >= mu).sum(axis=0), 1).astype(np.int64)
    weights = np.log(counts.sum() / counts.astype(np.float64))
    return HeadSparsity(threshold_mu=float(mu), counts=counts, weights=weights)


def mine_seed(att: AttentionStack, weights: np.ndarray) -> SeedResult:
    """Pick the patch with the least weight-combined attention.

    Ties go to the lowest patch index. With unit weights this reduces to
    the plain least-attended patch.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (att.heads,):
        raise DataError(
            f"expected {att.heads} head weights, got shape {weights.shape}"
        )
    if not np.all(np.isfinite(weights)):
        raise DataError("head weights must be finite")
    combined = att.values.astype(np.float64) @ weights
    return SeedResult(seed_index=int(np.argmin(combined)), weighted_attention=combined)


def weighted_features(feat: FeatureStack, weights: np.ndarray) -> WeightedFeatures:
    """Concatenate per-head features scaled by their head weights."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (feat.heads,):
        raise DataError(
            f"expected {feat.heads} head weights, got shape {weights.shape}"
        )
    scaled = feat.values.astype(np.float64) * weights[:, None, None]
    h, n, d = scaled.shape
    values = np.transpose(scaled, (1, 0, 2)).reshape(n, h * d)
    return WeightedFeatures(grid=feat.grid, values=values)


def background_mask(wf: WeightedFeatures, seed: int, tau: float) -> BinaryMask:
    """Mark every patch cosine-similar (>= tau) to the seed as background.

    Zero-norm feature rows get similarity 0 and stay out of the mask; a
    zero-norm seed is an error because no similarity is defined for it.
    """
    n = wf.values.shape[0]
    if not 0 <= seed < n:
        raise DataError(f"seed index {seed} out of range for {n} patches")
    feats = wf.values
    seed_vec = feats[seed]
    seed_norm = np.linalg.norm(seed_vec)
    if seed_norm == 0.0:
        raise DegenerateSeedError(f"seed patch {seed} has a zero-norm feature")
    norms = np.linalg.norm(feats, axis=1)
    sims = np.zeros(n)
    nonzero = norms > 0
    sims[nonzero] = (feats[nonzero] @ seed_vec) / (norms[nonzero] * seed_norm)
    mask = (sims >= tau).astype(np.uint8)
    return BinaryMask("patch", mask.reshape(wf.grid.rows, wf.grid.cols))


def foreground_mask(bg: BinaryMask) -> BinaryMask:
    return bg.complement()


def discover(shard: Shard, cfg: DiscoveryConfig) -> tuple[BinaryMask, SeedResult, HeadSparsity]:
    """Run the full first stage on one shard.

    Returns the coarse foreground mask at patch resolution plus the seed
    and sparsity diagnostics that produced it.
    """
    mu = mean_attention_threshold(shard.attention)
    sparsity = compute_sparsity(shard.attention, mu)
    weights = sparsity.weights if cfg.reweight else np.ones(shard.attention.heads)
    seed = mine_seed(shard.attention, weights)
    wf = weighted_features(shard.features, weights)
    bg = background_mask(wf, seed.seed_index, cfg.tau)
    return foreground_mask(bg), seed, sparsity
