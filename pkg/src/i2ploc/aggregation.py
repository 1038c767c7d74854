"""NetVLAD-style aggregation of local features into a global descriptor.

Local features are softly assigned to learned cluster centers; the
residuals against each center are summed (optionally weighted by
per-token saliency), intra-normalized per cluster, flattened, projected
to the output width, and L2-normalized. Saliency scores of mean 1 make
the weighted variant reduce exactly to the plain one under uniform
attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import LocalFeatures
from .errors import DataError, NumericError
from .nncore import Tensor, init_linear, l2_normalize, softmax


@dataclass
class VladParams:
    """Learnable aggregation state for one modality tower."""

    centers: Tensor  # (K, D)
    assign_w: Tensor  # (K, D)
    assign_b: Tensor  # (K,)
    proj: Tensor  # (D*K, out_dim), bias-free

    def tensors(self):
        yield "centers", self.centers
        yield "assign_w", self.assign_w
        yield "assign_b", self.assign_b
        yield "proj", self.proj


@dataclass
class GlobalFeature:
    """A finished descriptor record as stored in retrieval databases."""

    vector: np.ndarray  # (out_dim,), unit norm
    modality: str
    sample_id: int

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-5:
            raise NumericError(f"global feature norm {norm} is not 1")


def init_vlad(
    rng: np.random.Generator,
    feature_dim: int,
    clusters: int = 64,
    out_dim: int = 256,
    assign_sharpness: float = 15.0,
) -> VladParams:
    """Seeded random unit-vector centers with center-aligned assignments.

    Assignment weights start at ``2 * sharpness * centers`` (bias
    ``-sharpness``), the soft equivalent of assigning each feature to its
    nearest center; a diffuse random assignment collapses every cluster
    column onto its center's constant and erases the per-sample signal.
    """
    c = rng.standard_normal((clusters, feature_dim)).astype(np.float32)
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    proj, _ = init_linear(rng, feature_dim * clusters, out_dim)
    return VladParams(
        centers=Tensor(c, requires_grad=True),
        assign_w=Tensor((2.0 * assign_sharpness * c).astype(np.float32), requires_grad=True),
        assign_b=Tensor(np.full(clusters, -assign_sharpness, dtype=np.float32), requires_grad=True),
        proj=proj,
    )


def soft_assign(features: Tensor, p: VladParams) -> Tensor:
    """Per-token cluster probabilities: softmax_k(w_k . f_i + b_k), (…, N, K)."""
    if features.shape[-1] != p.assign_w.shape[-1]:
        raise DataError(f"feature dim {features.shape[-1]} vs assignment dim {p.assign_w.shape[-1]}")
    logits = features @ p.assign_w.swapaxes(-1, -2) + p.assign_b
    return softmax(logits, axis=-1)


def _weighted_vlad(features: Tensor, weights: Tensor, p: VladParams) -> Tensor:
    # V(j,k) = sum_i w_ik f_i(j) - c_k(j) * sum_i w_ik
    moments = features.swapaxes(-1, -2) @ weights  # (…, D, K)
    mass = weights.sum(axis=-2, keepdims=True)  # (…, 1, K)
    return moments - p.centers.swapaxes(-1, -2) * mass


def netvlad(features: Tensor, p: VladParams) -> Tensor:
    """Plain residual aggregation, (…, N, D) -> (…, D, K)."""
    return _weighted_vlad(features, soft_assign(features, p), p)


def saliency_netvlad(features: Tensor, saliency: Tensor, p: VladParams) -> Tensor:
    """Residual aggregation with per-token saliency weights, (…, D, K)."""
    if saliency.shape != features.shape[:-1]:
        raise DataError(f"saliency shape {saliency.shape} does not match tokens {features.shape[:-1]}")
    assign = soft_assign(features, p)
    weights = assign * saliency.reshape(saliency.shape + (1,))
    return _weighted_vlad(features, weights, p)


def project_global(vlad: Tensor, p: VladParams, intra_norm: bool = True) -> Tensor:
    """Normalize, flatten, and project the VLAD matrix to a unit vector.

    Intra-normalization rescales each cluster's residual column to unit
    length before flattening, which also makes the output invariant to a
    common positive rescaling of the whole VLAD matrix.
    """
    d, k = vlad.shape[-2:]
    if p.proj.shape[0] != d * k:
        raise DataError(f"projection expects {p.proj.shape[0]} inputs, vlad gives {d * k}")
    if intra_norm:
        vlad = l2_normalize(vlad, axis=-2)
    single = vlad.ndim == 2
    flat = vlad.reshape((1,) * single + vlad.shape[:-2] + (d * k,))
    out = flat @ p.proj
    if single:
        out = out.reshape(out.shape[-1:])
    norms = np.linalg.norm(out.data, axis=-1)
    if np.any(norms < 1e-12):
        raise NumericError("degenerate global feature: zero vector before normalization")
    return l2_normalize(out, axis=-1)


def aggregate(
    tokens: Tensor, saliency: Tensor, p: VladParams, intra_norm: bool = True
) -> Tensor:
    """Saliency-weighted NetVLAD followed by the global projection."""
    return project_global(saliency_netvlad(tokens, saliency, p), p, intra_norm=intra_norm)


def global_feature(
    lf: LocalFeatures,
    p: VladParams,
    modality: str = "",
    sample_id: int = -1,
    intra_norm: bool = True,
) -> GlobalFeature:
    """Aggregate one sample's local features into a stored descriptor record."""
    if lf.tokens.ndim != 2:
        raise DataError("global_feature expects a single sample, not a batch")
    vec = aggregate(lf.tokens, lf.saliency, p, intra_norm=intra_norm)
    return GlobalFeature(vector=vec.data.astype(np.float32), modality=modality, sample_id=sample_id)
