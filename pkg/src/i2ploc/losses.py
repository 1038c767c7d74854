"""Contrastive and cross-modal relation-consistency training losses.

The contrastive term treats each image descriptor as a query against the
batch's cloud descriptors (the matching pair is the positive, everything
else a negative). The relation terms ask that pairwise relations between
samples agree across modalities, measured both in flat space (dot
product by default) and on the Poincaré ball after an exponential map,
and are combined with configurable weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .manifold import exp_map, hyp_dist
from .nncore import Tensor

RELATION_METRICS = ("dot", "euclidean_distance")


@dataclass
class BatchFeatures:
    """Paired unit-norm descriptors: row i of both towers is one scene."""

    image: Tensor  # (B, out_dim)
    cloud: Tensor  # (B, out_dim)

    def __post_init__(self):
        if self.image.ndim != 2 or self.image.shape != self.cloud.shape:
            raise DataError(
                f"paired feature matrices must match, got {self.image.shape} vs {self.cloud.shape}"
            )
        for name, t in (("image", self.image), ("cloud", self.cloud)):
            norms = np.linalg.norm(t.data, axis=-1)
            if np.abs(norms - 1.0).max() > 1e-4:
                raise DataError(f"{name} feature rows must be unit-norm")

    @property
    def batch_size(self) -> int:
        return self.image.shape[0]


@dataclass
class LossConfig:
    temperature: float = 0.07
    euclidean_weight: float = 1.0
    hyperbolic_weight: float = 2.0
    curvature: float = 1.0
    relation_metric: str = "dot"
    symmetrize_infonce: bool = False

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.euclidean_weight < 0 or self.hyperbolic_weight < 0:
            raise ConfigError("relation weights must be nonnegative")
        if self.relation_metric not in RELATION_METRICS:
            raise ConfigError(f"unknown relation metric {self.relation_metric!r}")


def _zero() -> Tensor:
    return Tensor(np.zeros((), dtype=np.float32))


def _nce_direction(queries: Tensor, keys: Tensor, temperature: float) -> Tensor:
    sim = (queries @ keys.swapaxes(-1, -2)) * (1.0 / temperature)
    shift = sim.data.max(axis=-1, keepdims=True)
    lse = (sim - Tensor(shift)).exp().sum(axis=-1).log() + Tensor(shift[..., 0])
    eye = np.eye(sim.shape[0], dtype=sim.data.dtype)
    positives = (sim * Tensor(eye)).sum(axis=-1)
    return (lse - positives).mean()


def infonce(bf: BatchFeatures, temperature: float = 0.07) -> Tensor:
    """Mean over queries of -log softmax similarity of the matching pair.

    Image rows are the queries, cloud rows the keys. With a single pair
    the positive is its own normalizer, so the loss is exactly zero.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    return _nce_direction(bf.image, bf.cloud, temperature)


def infonce_symmetric(bf: BatchFeatures, temperature: float = 0.07) -> Tensor:
    """Average of the image->cloud and cloud->image directions."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    fwd = _nce_direction(bf.image, bf.cloud, temperature)
    bwd = _nce_direction(bf.cloud, bf.image, temperature)
    return (fwd + bwd) * 0.5


def _pair_mask(b: int, dtype) -> tuple[np.ndarray, int]:
    mask = np.triu(np.ones((b, b), dtype=dtype), k=1)
    return mask, b * (b - 1) // 2


def _relation_matrix(features: Tensor, metric: str) -> Tensor:
    if metric == "dot":
        return features @ features.swapaxes(-1, -2)
    if metric == "euclidean_distance":
        gram = features @ features.swapaxes(-1, -2)
        sq = (features * features).sum(axis=-1, keepdims=True)
        d2 = sq + sq.swapaxes(-1, -2) - 2.0 * gram
        return d2.clip_min(1e-12).sqrt()
    raise ConfigError(f"unknown relation metric {metric!r}")


def relation_consistency(bf: BatchFeatures, metric: str = "dot") -> Tensor:
    """MSE between the towers' pairwise relations, over unordered pairs i<j."""
    b = bf.batch_size
    if b < 2:
        return _zero()
    r_img = _relation_matrix(bf.image, metric)
    r_cld = _relation_matrix(bf.cloud, metric)
    mask, pairs = _pair_mask(b, r_img.data.dtype)
    diff = (r_img - r_cld) * Tensor(mask)
    return (diff * diff).sum() * (1.0 / pairs)


def hyperbolic_relation_consistency(bf: BatchFeatures, curvature: float = 1.0) -> Tensor:
    """Relation MSE after mapping rows onto the Poincaré ball.

    Rows go through the origin exponential map, pairwise geodesic
    distances are taken per tower, and the two distance tables are
    compared over unordered pairs.
    """
    b = bf.batch_size
    if b < 2:
        return _zero()
    d = bf.image.shape[-1]

    def pairwise(features: Tensor) -> Tensor:
        mapped = exp_map(features, curvature)
        left = mapped.reshape(b, 1, d)
        right = mapped.reshape(1, b, d)
        return hyp_dist(left, right, curvature)

    mask, pairs = _pair_mask(b, bf.image.data.dtype)
    diff = (pairwise(bf.image) - pairwise(bf.cloud)) * Tensor(mask)
    return (diff * diff).sum() * (1.0 / pairs)


def fused_relation(bf: BatchFeatures, cfg: LossConfig) -> Tensor:
    """Weighted sum of the flat-space and hyperbolic relation terms.

    Zero-weight terms are skipped entirely, so disabling one side leaves
    the other bit-identical to calling it alone.
    """
    cfg.validate()
    total = _zero()
    if cfg.euclidean_weight > 0:
        total = total + relation_consistency(bf, cfg.relation_metric) * cfg.euclidean_weight
    if cfg.hyperbolic_weight > 0:
        total = total + hyperbolic_relation_consistency(bf, cfg.curvature) * cfg.hyperbolic_weight
    return total


def loss_breakdown(bf: BatchFeatures, cfg: LossConfig) -> dict[str, Tensor]:
    """Contrastive and relation components plus their sum, one graph."""
    cfg.validate()
    nce = infonce_symmetric(bf, cfg.temperature) if cfg.symmetrize_infonce else infonce(bf, cfg.temperature)
    rel = fused_relation(bf, cfg)
    return {"infonce": nce, "relation": rel, "total": nce + rel}


def total_loss(bf: BatchFeatures, cfg: LossConfig) -> Tensor:
    """Contrastive plus fused relation-consistency loss."""
    return loss_breakdown(bf, cfg)["total"]
