"""Dual-tower model assembly: parameters, forward passes, checkpoints.

A model is two encoder towers plus two independent aggregation heads.
The image path maps pixel patches to a global descriptor; the cloud path
maps center-normalized point patches likewise. Geometry preprocessing
(ground removal, FPS, KNN) is seeded per sample id so every command
reproduces the same patches for the same data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pointops
from .aggregation import VladParams, aggregate, init_vlad
from .encoders import (
    CloudTowerParams,
    EncoderConfig,
    ImageTowerParams,
    encode_cloud_patches,
    encode_image_patches,
    init_cloud_tower,
    init_image_tower,
    patchify_image,
    prepare_cloud_patches,
)
from .errors import DataError
from .nncore import Tensor, load_checkpoint, save_checkpoint


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    clusters: int = 64
    global_dim: int = 256
    intra_norm: bool = True
    use_saliency: bool = True  # uniform token weights when off (plain NetVLAD)
    image_hw: tuple[int, int, int] = (512, 1024, 3)
    ground_removal: bool = True


@dataclass
class ModelParams:
    image: ImageTowerParams
    cloud: CloudTowerParams
    vlad_image: VladParams
    vlad_cloud: VladParams

    def named(self):
        """Flat (name, tensor) pairs; prefixes name the optimizer groups."""
        for name, t in self.image.tensors():
            yield f"image.{name}", t
        for name, t in self.cloud.tensors():
            yield f"cloud.{name}", t
        for name, t in self.vlad_image.tensors():
            yield f"vlad_image.{name}", t
        for name, t in self.vlad_cloud.tensors():
            yield f"vlad_cloud.{name}", t


def init_model(seed: int, cfg: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(
        image=init_image_tower(rng, cfg.encoder, cfg.image_hw),
        cloud=init_cloud_tower(rng, cfg.encoder),
        vlad_image=init_vlad(rng, cfg.encoder.image_dim, cfg.clusters, cfg.global_dim),
        vlad_cloud=init_vlad(rng, cfg.encoder.cloud_dim, cfg.clusters, cfg.global_dim),
    )


def _weights(lf, cfg: ModelConfig) -> Tensor:
    if cfg.use_saliency:
        return lf.saliency
    return Tensor(np.ones(lf.tokens.shape[:-1], dtype=lf.tokens.data.dtype))


def forward_image(patches, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Patches (…, N_2d, P*P*C) to unit global descriptors (…, D_g)."""
    lf = encode_image_patches(patches, params.image, cfg.encoder)
    return aggregate(lf.tokens, _weights(lf, cfg), params.vlad_image, intra_norm=cfg.intra_norm)


def forward_cloud(neighborhoods, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Patch neighborhoods (…, N_3d, k, 3) to unit global descriptors."""
    lf = encode_cloud_patches(neighborhoods, params.cloud, cfg.encoder)
    return aggregate(lf.tokens, _weights(lf, cfg), params.vlad_cloud, intra_norm=cfg.intra_norm)


def image_patches_for_sample(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    return patchify_image(image, cfg.encoder.patch_size)


def cloud_patches_for_sample(points: np.ndarray, cfg: ModelConfig, sample_id: int) -> np.ndarray:
    """Deterministic per-sample geometry: optional ground removal, then grouping."""
    pts = points
    if cfg.ground_removal and pts.shape[0] >= 3:
        pts = pointops.ransac_ground_removal(pts, seed=sample_id)
    return prepare_cloud_patches(pts, cfg.encoder, seed=sample_id).neighborhoods


def decorrelate_projections(
    params: ModelParams,
    image_patches: np.ndarray,
    cloud_patches: np.ndarray,
    cfg: ModelConfig,
    max_samples: int = 128,
) -> None:
    """Orthogonalize each VLAD projection against the dataset-mean descriptor.

    At random init the flattened VLAD vectors share one dominant mean
    direction across samples; projecting it out of the output projection
    makes the global features start well spread on the sphere instead of
    collapsed, which contrastive training from scratch needs. Runs once
    at init time (deterministic, no RNG) and touches nothing at
    inference.
    """
    from .aggregation import saliency_netvlad
    from .nncore import l2_normalize

    img = Tensor(image_patches[:max_samples])
    cld = Tensor(cloud_patches[:max_samples])
    li = encode_image_patches(img, params.image, cfg.encoder)
    lc = encode_cloud_patches(cld, params.cloud, cfg.encoder)
    for lf, vp in ((li, params.vlad_image), (lc, params.vlad_cloud)):
        v = saliency_netvlad(lf.tokens, _weights(lf, cfg), vp)
        if cfg.intra_norm:
            v = l2_normalize(v, axis=-2)
        flat = v.data.reshape(v.shape[0], -1)
        mean = flat.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            continue
        mean = mean / norm
        vp.proj.data = (vp.proj.data - np.outer(mean, mean @ vp.proj.data)).astype(np.float32)


def bind_flat_params(flat: dict[str, Tensor], seed: int, cfg: ModelConfig) -> ModelParams:
    """Rebuild a ModelParams structure whose fields ARE the given tensors.

    Lets callers (the gradient checker in particular) evaluate the model
    as a function of a flat name -> Tensor dict.
    """
    ref = init_model(seed, cfg)
    it, ct = ref.image, ref.cloud
    it.patch_proj_w = flat["image.patch_proj.w"]
    it.patch_proj_b = flat["image.patch_proj.b"]
    it.class_token = flat["image.class_token"]
    it.pos_embed = flat["image.pos_embed"]
    for i, blk in enumerate(it.blocks):
        for fname, _ in blk.tensors():
            setattr(blk, fname, flat[f"image.block{i}.{fname}"])
    ct.mlp = [(flat[f"cloud.mlp{i}.w"], flat[f"cloud.mlp{i}.b"]) for i in range(len(ct.mlp))]
    ct.token_proj_w = flat["cloud.token_proj.w"]
    ct.token_proj_b = flat["cloud.token_proj.b"]
    ct.pos_embeds = [flat[f"cloud.pos_embed{i}"] for i in range(len(ct.pos_embeds))]
    for i, blk in enumerate(ct.blocks):
        for fname, _ in blk.tensors():
            setattr(blk, fname, flat[f"cloud.block{i}.{fname}"])
    for vp, prefix in ((ref.vlad_image, "vlad_image"), (ref.vlad_cloud, "vlad_cloud")):
        vp.centers = flat[f"{prefix}.centers"]
        vp.assign_w = flat[f"{prefix}.assign_w"]
        vp.assign_b = flat[f"{prefix}.assign_b"]
        vp.proj = flat[f"{prefix}.proj"]
    return ref


def save_model(base_path: str, params: ModelParams, extra: dict | None = None) -> None:
    save_checkpoint(base_path, dict(params.named()), extra=extra)


def load_model(base_path: str, seed: int, cfg: ModelConfig) -> tuple[ModelParams, dict]:
    """Rebuild the parameter structure and fill it from a checkpoint."""
    params = init_model(seed, cfg)
    arrays, extra = load_checkpoint(base_path)
    expected = dict(params.named())
    if set(arrays) != set(expected):
        missing = set(expected) - set(arrays)
        surplus = set(arrays) - set(expected)
        raise DataError(f"checkpoint does not fit config (missing {missing}, surplus {surplus})")
    for name, tensor in expected.items():
        if arrays[name].shape != tensor.shape:
            raise DataError(
                f"checkpoint {name}: shape {arrays[name].shape} vs config {tensor.shape}"
            )
        tensor.data = arrays[name].copy()
        tensor.zero_grad()
    return params, extra
