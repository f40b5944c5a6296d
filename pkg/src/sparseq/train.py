"""Fine-tuning loop for the surrogate model."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rng_mod
from .core import Raster, SparseLabels, dilate_pixels
from .errors import ConfigurationError, DomainError, TrainingError
from .losses import LOSS_KINDS, sparse_objective
from .metrics import DEFAULT_QUANTILES
from .model import PixelSet, SurrogateModel
from .optim import AdamW, clip_by_global_norm, linear_schedule

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    batch_size: int = 5
    epochs: int = 2
    freeze_backbone: bool = True
    loss_kind: str = "quantile"
    use_shift_loss: bool = True
    seed: int = 0
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigurationError("warmup_fraction must lie in [0, 1)")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    grad_norm: float


@dataclass
class TrainResult:
    model: SurrogateModel
    trace: list[StepRecord] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.trace])


class _Sample:
    def __init__(self, model: SurrogateModel, x: Raster, labels: SparseLabels, config: TrainerConfig):
        if len(labels) == 0:
            raise DomainError("every training sample needs at least one label")
        self.x = x.data if isinstance(x, Raster) else np.asarray(x)
        self.labels = labels
        h, w = labels.shape
        if self.x.shape[1:] != (h, w):
            raise ConfigurationError(f"features {self.x.shape} do not match label grid {(h, w)}")
        radius = 1 if config.use_shift_loss else 0
        r, c = dilate_pixels(labels.rows, labels.cols, radius, (h, w))
        self.pixels = PixelSet((h, w), r, c)
        # frozen backbone: its activations never change, compute them once
        self.features = model.backbone_features(self.x) if config.freeze_backbone else None

    def loss_and_grads(self, model: SurrogateModel, config: TrainerConfig):
        cache: dict = {}
        out = model.forward_pixels(self.x, self.pixels, self.features, cache)
        h, w = self.labels.shape
        dense = np.zeros((out.shape[0], h, w))
        r, c = self.pixels.rows, self.pixels.cols
        dense[:, r, c] = out
        loss, g = sparse_objective(config.loss_kind, DEFAULT_QUANTILES, self.labels, dense,
                                   config.use_shift_loss)
        grads = model.backward(cache, g[:, r, c], train_backbone=not config.freeze_backbone)
        return loss, grads


def train(model: SurrogateModel, dataset: Sequence[tuple[Raster, SparseLabels]],
          config: TrainerConfig, callback: Callable[[StepRecord], None] | None = None) -> TrainResult:
    """Train ``model`` in place and return it with the per-step loss trace.

    Batches are drawn from a per-epoch permutation seeded by ``config.seed``;
    gradients are summed over a batch in permutation order, so two runs with
    the same seed give bit-identical parameters.
    """
    if not dataset:
        raise DomainError("training needs a non-empty dataset")
    if model.loss_kind != config.loss_kind:
        raise ConfigurationError(
            f"model predicts {model.loss_kind!r} outputs but config trains {config.loss_kind!r}"
        )
    samples = [_Sample(model, x, y, config) for x, y in dataset]
    trainable = [k for k in model.params if not (config.freeze_backbone and model.is_backbone(k))]
    opt = AdamW({k: model.params[k] for k in trainable}, lr=config.learning_rate,
                weight_decay=config.weight_decay)
    per_epoch = math.ceil(len(samples) / config.batch_size)
    total = per_epoch * config.epochs
    result = TrainResult(model)
    step = 0
    for epoch in range(config.epochs):
        order = rng_mod.stream(config.seed, rng_mod.SHUFFLE, epoch).permutation(len(samples))
        for b in range(per_epoch):
            batch = order[b * config.batch_size:(b + 1) * config.batch_size]
            acc = {k: np.zeros_like(model.params[k]) for k in trainable}
            loss_sum = 0.0
            for i in batch:
                loss, grads = samples[i].loss_and_grads(model, config)
                loss_sum += loss
                for k in trainable:
                    acc[k] += grads[k]
            loss = loss_sum / len(batch)
            if not math.isfinite(loss):
                raise TrainingError("non-finite training loss", step)
            acc = {k: g / len(batch) for k, g in acc.items()}
            acc, norm = clip_by_global_norm(acc, config.grad_clip_norm)
            if not math.isfinite(norm):
                raise TrainingError("non-finite gradient norm", step)
            lr = config.learning_rate * linear_schedule(step, total, config.warmup_fraction)
            opt.step(model.params, acc, lr)
            rec = StepRecord(step, epoch, lr, loss, norm)
            result.trace.append(rec)
            if callback is not None:
                callback(rec)
            step += 1
        log.debug("epoch %d done, last loss %.4f", epoch, result.trace[-1].loss)
    return result
