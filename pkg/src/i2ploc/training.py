"""Training loop for the dual-tower model.

Per-group learning rates (image tower, cloud tower, aggregation heads),
linear warmup + cosine schedule, gradient accumulation, and a choice of
plain SGD (coupled weight decay) or Adam (decoupled decay). Batch order
is a pure function of (seed, epoch), and the optimizer state is
checkpointable, so resuming replays the remaining epochs exactly.

Training from random init collapses easily at small scale: if one tower
reaches a constant output, the contrastive gradient vanishes for the
other. The ``cloud_freeze_epochs`` anchor phase holds the cloud tower
and its head fixed while the image side aligns to them, after which the
(typically much lower) cloud rate takes over.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .losses import BatchFeatures, LossConfig, loss_breakdown
from .model import ModelConfig, ModelParams, forward_cloud, forward_image
from .nncore import Tensor

OPTIMIZERS = ("sgd", "adam")


@dataclass
class OptimSettings:
    optimizer: str = "sgd"
    lr_image: float = 1e-4
    lr_cloud: float = 1e-5
    lr_aggregator: float = 5e-4
    weight_decay: float = 1e-3
    epochs: int = 100
    warmup_epochs: int = 3
    batch_size: int = 4
    accum_steps: int = 64
    cosine_schedule: bool = True
    cloud_freeze_epochs: int = 0

    def validate(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if min(self.lr_image, self.lr_cloud, self.lr_aggregator) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.accum_steps < 1 or self.epochs < 1:
            raise ConfigError("batch size, accumulation steps, and epochs must be >= 1")
        if self.warmup_epochs < 0 or self.cloud_freeze_epochs < 0:
            raise ConfigError("warmup and freeze epoch counts must be >= 0")


def schedule_factor(epoch: int, settings: OptimSettings) -> float:
    """Multiplier on the base rates for a 0-indexed epoch."""
    if settings.warmup_epochs > 0 and epoch < settings.warmup_epochs:
        return (epoch + 1) / settings.warmup_epochs
    if not settings.cosine_schedule:
        return 1.0
    span = max(settings.epochs - settings.warmup_epochs, 1)
    progress = min((epoch - settings.warmup_epochs) / span, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * progress))


def _group_rate(name: str, settings: OptimSettings) -> float:
    if name.startswith("image."):
        return settings.lr_image
    if name.startswith(("cloud.", "vlad_cloud.")):
        return settings.lr_cloud
    return settings.lr_aggregator


def _is_cloud_side(name: str) -> bool:
    return name.startswith(("cloud.", "vlad_cloud."))


def frozen_parameter_names(params: ModelParams, cfg: ModelConfig) -> set[str]:
    """Block parameters excluded from updates under partial fine-tuning."""
    trainable = cfg.encoder.trainable_blocks
    if trainable is None:
        return set()
    cutoff = cfg.encoder.blocks - trainable
    frozen = set()
    for name, _ in params.named():
        parts = name.split(".")
        if len(parts) >= 2 and parts[1].startswith("block"):
            if int(parts[1][len("block"):]) < cutoff:
                frozen.add(name)
    return frozen


class Optimizer:
    """SGD or Adam over a named parameter dict, with persistable state."""

    def __init__(self, named: dict[str, Tensor], settings: OptimSettings):
        settings.validate()
        self.named = named
        self.settings = settings
        self.step_count = 0
        if settings.optimizer == "adam":
            self._m = {n: np.zeros_like(t.data) for n, t in named.items()}
            self._v = {n: np.zeros_like(t.data) for n, t in named.items()}

    def step(self, factor: float, skip: set[str], grad_scale: float) -> None:
        s = self.settings
        self.step_count += 1
        for name, t in self.named.items():
            grad = t.grad
            t.zero_grad()
            if grad is None or name in skip:
                continue
            g = grad * grad_scale
            lr = _group_rate(name, s) * factor
            if s.optimizer == "sgd":
                t.data = t.data - lr * (g + s.weight_decay * t.data)
                continue
            m = self._m[name] = 0.9 * self._m[name] + 0.1 * g
            v = self._v[name] = 0.999 * self._v[name] + 0.001 * g * g
            m_hat = m / (1.0 - 0.9 ** self.step_count)
            v_hat = v / (1.0 - 0.999 ** self.step_count)
            t.data = t.data - lr * (m_hat / (np.sqrt(v_hat) + 1e-8) + s.weight_decay * t.data)

    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        extra = {"step_count": self.step_count, "optimizer": self.settings.optimizer}
        if self.settings.optimizer == "sgd":
            return {}, extra
        arrays = {}
        for n in self.named:
            arrays[f"m.{n}"] = self._m[n]
            arrays[f"v.{n}"] = self._v[n]
        return arrays, extra

    def load_state(self, arrays: dict[str, np.ndarray], extra: dict) -> None:
        if extra.get("optimizer") != self.settings.optimizer:
            raise ConfigError(
                f"checkpoint optimizer {extra.get('optimizer')!r} vs configured {self.settings.optimizer!r}"
            )
        self.step_count = int(extra.get("step_count", 0))
        if self.settings.optimizer == "adam":
            for n in self.named:
                self._m[n] = arrays[f"m.{n}"].astype(np.float64 if self._m[n].dtype == np.float64 else np.float32)
                self._v[n] = arrays[f"v.{n}"].astype(self._m[n].dtype)


def batch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    """Deterministic per-epoch shuffle, independent of earlier epochs."""
    return np.random.default_rng((seed + 1) * 1_000_003 + epoch).permutation(count)


@dataclass
class EpochStats:
    epoch: int  # 1-based in logs
    total: float
    infonce: float
    relation: float
    lr_factor: float


def train(
    params: ModelParams,
    image_patches: np.ndarray,
    cloud_patches: np.ndarray,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    settings: OptimSettings,
    seed: int,
    start_epoch: int = 0,
    optimizer: Optimizer | None = None,
    on_epoch=None,
) -> list[EpochStats]:
    """Run epochs ``start_epoch .. settings.epochs`` over precomputed patches.

    ``image_patches`` is (n, N_2d, P*P*C) and ``cloud_patches`` is
    (n, N_3d, k, 3), row i of both describing the same scene. Raises on a
    non-finite loss instead of continuing with poisoned parameters.
    """
    settings.validate()
    loss_cfg.validate()
    n = image_patches.shape[0]
    if cloud_patches.shape[0] != n or n < 1:
        raise ConfigError("image and cloud patch arrays must pair up")
    named = dict(params.named())
    if optimizer is None:
        optimizer = Optimizer(named, settings)
    always_frozen = frozen_parameter_names(params, model_cfg)
    cloud_names = {name for name in named if _is_cloud_side(name)}
    history: list[EpochStats] = []

    for epoch in range(start_epoch, settings.epochs):
        order = batch_order(seed, epoch, n)
        factor = schedule_factor(epoch, settings)
        skip = set(always_frozen)
        if epoch < settings.cloud_freeze_epochs:
            skip |= cloud_names
        sums = {"total": 0.0, "infonce": 0.0, "relation": 0.0}
        steps = 0
        pending = 0

        for lo in range(0, n, settings.batch_size):
            idx = order[lo : lo + settings.batch_size]
            feats = BatchFeatures(
                image=forward_image(Tensor(image_patches[idx]), params, model_cfg),
                cloud=forward_cloud(Tensor(cloud_patches[idx]), params, model_cfg),
            )
            parts = loss_breakdown(feats, loss_cfg)
            value = parts["total"].item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}")
            parts["total"].backward()
            pending += 1
            steps += 1
            for key in sums:
                sums[key] += parts[key].item()
            if pending >= settings.accum_steps:
                optimizer.step(factor, skip, 1.0 / pending)
                pending = 0
        if pending:
            optimizer.step(factor, skip, 1.0 / pending)

        stats = EpochStats(
            epoch=epoch + 1,
            total=sums["total"] / steps,
            infonce=sums["infonce"] / steps,
            relation=sums["relation"] / steps,
            lr_factor=factor,
        )
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return history
