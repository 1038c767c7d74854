"""Modality-specific feature extractors.

The image tower patchifies pixels, projects patches to tokens, prepends
a class token, and runs a stack of pre-norm transformer blocks. The
point-cloud tower samples patch centers (FPS), groups neighbors (KNN),
normalizes them to their centers, embeds each patch with a shared
per-point MLP + channel max-pool, and runs its own block stack with a
learnable position embedding per depth (no class token).

Both towers expose the final block's attention as per-token saliency
scores, rescaled to mean 1 so downstream saliency-weighted aggregation
reduces exactly to the unweighted variant under uniform attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pointops
from .errors import ConfigError, DataError
from .nncore import BlockParams, Tensor, concat, init_block, init_linear, linear, transformer_block

SALIENCY_MODES = ("class_row", "received_mean")


@dataclass
class EncoderConfig:
    """Shared knobs of both towers; defaults are full scale."""

    patch_size: int = 16
    blocks: int = 12
    image_heads: int = 6
    cloud_heads: int = 3
    image_dim: int = 384
    cloud_dim: int = 384
    cloud_tokens: int = 3072
    neighbors: int = 32
    use_class_token_image: bool = True
    use_class_token_cloud: bool = False
    ffn_mult: int = 4
    tokenizer_hidden: tuple[int, ...] = (128, 1024)
    image_saliency_mode: str = "class_row"
    cloud_saliency_mode: str = "received_mean"
    # train only the last n blocks of each tower when set (0 trains none)
    trainable_blocks: int | None = None

    def validate(self) -> None:
        if self.patch_size < 1 or self.blocks < 0:
            raise ConfigError("patch size must be >= 1 and block count >= 0")
        if self.image_dim % self.image_heads != 0:
            raise ConfigError(f"image dim {self.image_dim} not divisible by {self.image_heads} heads")
        if self.cloud_dim % self.cloud_heads != 0:
            raise ConfigError(f"cloud dim {self.cloud_dim} not divisible by {self.cloud_heads} heads")
        if self.use_class_token_cloud:
            raise ConfigError("the cloud tower runs without a class token")
        if not self.use_class_token_image and self.image_saliency_mode == "class_row":
            raise ConfigError("class_row saliency needs the image class token")
        if self.image_saliency_mode not in SALIENCY_MODES:
            raise ConfigError(f"unknown saliency mode {self.image_saliency_mode!r}")
        if self.cloud_saliency_mode != "received_mean":
            raise ConfigError("cloud saliency supports received_mean only (no class token)")
        if self.tokenizer_hidden[-1] < 1:
            raise ConfigError("tokenizer needs at least one hidden width")


@dataclass
class LocalFeatures:
    """Per-token features and saliency scores for one sample (or a batch).

    ``tokens`` is (..., N, D); ``saliency`` is (..., N), nonnegative with
    mean 1 along the token axis.
    """

    tokens: Tensor
    saliency: Tensor


@dataclass
class ImageTowerParams:
    patch_proj_w: Tensor
    patch_proj_b: Tensor
    class_token: Tensor  # (D,)
    pos_embed: Tensor  # (N+1, D) with class token, else (N, D)
    blocks: list[BlockParams]

    def tensors(self):
        yield "patch_proj.w", self.patch_proj_w
        yield "patch_proj.b", self.patch_proj_b
        yield "class_token", self.class_token
        yield "pos_embed", self.pos_embed
        for i, blk in enumerate(self.blocks):
            for name, t in blk.tensors():
                yield f"block{i}.{name}", t


@dataclass
class CloudTowerParams:
    mlp: list[tuple[Tensor, Tensor]]  # shared per-point MLP layers
    token_proj_w: Tensor  # pooled width -> cloud_dim
    token_proj_b: Tensor
    pos_embeds: list[Tensor]  # one (N_3d, D) embedding per block depth
    blocks: list[BlockParams]

    def tensors(self):
        for i, (w, b) in enumerate(self.mlp):
            yield f"mlp{i}.w", w
            yield f"mlp{i}.b", b
        yield "token_proj.w", self.token_proj_w
        yield "token_proj.b", self.token_proj_b
        for i, pe in enumerate(self.pos_embeds):
            yield f"pos_embed{i}", pe
        for i, blk in enumerate(self.blocks):
            for name, t in blk.tensors():
                yield f"block{i}.{name}", t


def validate_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim not in (3, 4):
        raise DataError(f"image must be (H, W, C) or (B, H, W, C), got {arr.shape}")
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("image values must be finite and in [0, 1]")
    return arr


def patchify_image(img, patch_size: int) -> np.ndarray:
    """Cut (…, H, W, C) pixels into (…, H*W/P^2, P*P*C) flattened patches.

    Patches come out in raster order; each row is the patch's pixels in
    row-major order with channels last.
    """
    arr = validate_image(img)
    h, w, c = arr.shape[-3:]
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    lead = arr.shape[:-3]
    grid = arr.reshape(lead + (h // p, p, w // p, p, c))
    axes = tuple(range(len(lead))) + tuple(len(lead) + a for a in (0, 2, 1, 3, 4))
    return grid.transpose(axes).reshape(lead + ((h // p) * (w // p), p * p * c))


def image_tokens(patches, params: ImageTowerParams, use_class_token: bool = True) -> Tensor:
    """Project patches to tokens, prepend the class token, add position embeddings."""
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=np.float32))
    tokens = linear(x, params.patch_proj_w, params.patch_proj_b)
    if use_class_token:
        d = params.class_token.shape[-1]
        ct = params.class_token.reshape(1, d)
        if tokens.ndim > 2:  # broadcast the class token across the batch
            ct = ct + Tensor(np.zeros(tokens.shape[:-2] + (1, d), dtype=np.float32))
        tokens = concat([ct, tokens], axis=-2)
    if tokens.shape[-2:] != params.pos_embed.shape:
        raise DataError(
            f"position embedding {params.pos_embed.shape} does not fit tokens {tokens.shape}"
        )
    return tokens + params.pos_embed


def tokenize_3d(neighborhoods, params: CloudTowerParams) -> Tensor:
    """Shared MLP per point, channel max-pool over neighbors, projection.

    Input is (…, m, k, 3) center-relative coordinates (a PatchSet's
    neighborhoods); output is (…, m, D) patch tokens. Permuting the k
    points of a patch cannot change its token.
    """
    if isinstance(neighborhoods, pointops.PatchSet):
        neighborhoods = neighborhoods.neighborhoods
    x = neighborhoods if isinstance(neighborhoods, Tensor) else Tensor(np.asarray(neighborhoods, dtype=np.float32))
    for w, b in params.mlp:
        x = linear(x, w, b).relu()
    pooled = x.max(axis=-2)
    return linear(pooled, params.token_proj_w, params.token_proj_b)


def saliency_from_attention(attn: Tensor, mode: str, has_class_token: bool = False) -> Tensor:
    """Distill a per-token saliency vector out of one block's attention.

    ``class_row`` takes the head-mean of the class-token query row over
    the patch keys; ``received_mean`` takes the head-and-query mean of
    the attention each token receives. Either way the result is rescaled
    to mean 1 over the token axis, and class-token entries never appear
    in the output.
    """
    if mode not in SALIENCY_MODES:
        raise ConfigError(f"unknown saliency mode {mode!r}")
    lead = attn.ndim - 3  # (..., heads, N, N)
    head_axis = lead
    if mode == "class_row":
        if not has_class_token:
            raise ConfigError("class_row saliency requires a class token")
        scores = attn[..., 0, 1:].mean(axis=head_axis)
    else:
        start = 1 if has_class_token else 0
        scores = attn[..., start:, start:].mean(axis=(head_axis, head_axis + 1))
    return scores / scores.mean(axis=-1, keepdims=True)


def _run_blocks(x: Tensor, blocks: list[BlockParams], heads: int, pos_embeds=None):
    attn = None
    for i, blk in enumerate(blocks):
        if pos_embeds is not None:
            x = x + pos_embeds[i]
        x, ao = transformer_block(x, blk, heads)
        attn = ao.attn
    return x, attn


def _uniform_saliency(tokens: Tensor) -> Tensor:
    return Tensor(np.ones(tokens.shape[:-1], dtype=tokens.data.dtype))


def encode_image_patches(patches, params: ImageTowerParams, cfg: EncoderConfig) -> LocalFeatures:
    """Token path of the image tower; `patches` is (…, N_2d, P*P*C)."""
    x = image_tokens(patches, params, cfg.use_class_token_image)
    x, attn = _run_blocks(x, params.blocks, cfg.image_heads)
    tokens = x[..., 1:, :] if cfg.use_class_token_image else x
    if attn is None:  # degenerate zero-block stack, used in tests
        return LocalFeatures(tokens=tokens, saliency=_uniform_saliency(tokens))
    saliency = saliency_from_attention(attn, cfg.image_saliency_mode, cfg.use_class_token_image)
    return LocalFeatures(tokens=tokens, saliency=saliency)


def encode_image(img, params: ImageTowerParams, cfg: EncoderConfig) -> LocalFeatures:
    return encode_image_patches(patchify_image(img, cfg.patch_size), params, cfg)


def prepare_cloud_patches(points, cfg: EncoderConfig, seed: int = 0) -> pointops.PatchSet:
    """FPS + KNN + center normalization; pads undersized clouds with a warning."""
    pts = pointops.validate_cloud(points)
    centers_idx = pointops.fps(pts, cfg.cloud_tokens, seed=seed, allow_pad=True)
    centers = pts[centers_idx]
    k = min(cfg.neighbors, pts.shape[0])
    idx = pointops.knn(pts, centers, k)
    if k < cfg.neighbors:  # repeat the nearest column so patch shape stays (k, 3)
        idx = np.concatenate([idx, np.repeat(idx[:, :1], cfg.neighbors - k, axis=1)], axis=1)
    return pointops.group_normalize(pts, centers, idx)


def encode_cloud_patches(neighborhoods, params: CloudTowerParams, cfg: EncoderConfig) -> LocalFeatures:
    """Token path of the cloud tower; neighborhoods is (…, N_3d, k, 3)."""
    x = tokenize_3d(neighborhoods, params)
    x, attn = _run_blocks(x, params.blocks, cfg.cloud_heads, params.pos_embeds)
    if attn is None:
        return LocalFeatures(tokens=x, saliency=_uniform_saliency(x))
    saliency = saliency_from_attention(attn, cfg.cloud_saliency_mode, has_class_token=False)
    return LocalFeatures(tokens=x, saliency=saliency)


def encode_cloud(points, params: CloudTowerParams, cfg: EncoderConfig, fps_seed: int = 0) -> LocalFeatures:
    return encode_cloud_patches(prepare_cloud_patches(points, cfg, fps_seed), params, cfg)


# -- parameter initialization ----------------------------------------------------


def init_image_tower(rng: np.random.Generator, cfg: EncoderConfig, image_hw: tuple[int, int, int]) -> ImageTowerParams:
    cfg.validate()
    h, w, c = image_hw
    if h % cfg.patch_size or w % cfg.patch_size:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {cfg.patch_size}")
    n_patches = (h // cfg.patch_size) * (w // cfg.patch_size)
    d = cfg.image_dim
    proj_w, proj_b = init_linear(rng, cfg.patch_size * cfg.patch_size * c, d)
    n_tokens = n_patches + (1 if cfg.use_class_token_image else 0)
    class_token = Tensor(rng.uniform(-0.02, 0.02, size=d).astype(np.float32), requires_grad=True)
    pos_embed = Tensor(rng.uniform(-0.02, 0.02, size=(n_tokens, d)).astype(np.float32), requires_grad=True)
    blocks = [init_block(rng, d, cfg.ffn_mult * d) for _ in range(cfg.blocks)]
    return ImageTowerParams(proj_w, proj_b, class_token, pos_embed, blocks)


def init_cloud_tower(rng: np.random.Generator, cfg: EncoderConfig) -> CloudTowerParams:
    cfg.validate()
    d = cfg.cloud_dim
    widths = (3,) + tuple(cfg.tokenizer_hidden)
    mlp = [init_linear(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
    proj_w, proj_b = init_linear(rng, widths[-1], d)
    pos_embeds = [
        Tensor(rng.uniform(-0.02, 0.02, size=(cfg.cloud_tokens, d)).astype(np.float32), requires_grad=True)
        for _ in range(cfg.blocks)
    ]
    blocks = [init_block(rng, d, cfg.ffn_mult * d) for _ in range(cfg.blocks)]
    return CloudTowerParams(mlp, proj_w, proj_b, pos_embeds, blocks)
