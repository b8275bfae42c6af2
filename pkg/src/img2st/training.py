"""SGD with momentum, weight decay and a per-step cosine learning-rate schedule."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .losses import LossConfig, contrastive_loss_grad, regression_loss_grad
from .model import ModelParams, backward, encode_expression, forward, spot_backward, spot_forward

__all__ = [
    "TrainConfig",
    "StepRecord",
    "EpochRecord",
    "TrainLog",
    "cosine_lr",
    "sgd_step",
    "stack_regions",
    "expression_embeddings",
    "predict",
    "train",
    "train_arrays",
    "train_spots",
    "write_trainlog_csv",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_final_fraction: float = 0.01
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    patience: int = 10
    min_rel_improvement: float = 1e-5

    def __post_init__(self):
        if not 0 < self.lr_final_fraction <= 1:
            raise ValueError("lr_final_fraction must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


# Full-scale preset: batch 64 at lr 1e-4. The desk preset raises the
# learning rate so that tens of epochs on a few dozen regions move the model.
FULL_SCALE_TRAIN = TrainConfig(lr0=1e-4, batch_size=64)
DESK_TRAIN = TrainConfig(lr0=0.1, batch_size=8, epochs=40)


def cosine_lr(step: int, total_steps: int, config: TrainConfig) -> float:
    """Cosine decay from ``lr0`` at step 0 to ``lr0 * lr_final_fraction`` at the last step."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr0 = config.lr0
    lr_final = lr0 * config.lr_final_fraction
    if step == 0:
        return lr0
    if step == total_steps:
        return lr_final
    return lr_final + (lr0 - lr_final) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def sgd_step(params: ModelParams, grads: dict, velocity: dict, lr: float, config: TrainConfig):
    """One in-place momentum SGD update; frozen parameters are skipped.

    ``g = grad + weight_decay * p``; ``v = momentum * v + g``; ``p -= lr * v``.
    """
    for name in params.trainable():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        p = params.tensors[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        g = g + config.weight_decay * p
        v = velocity.get(name)
        v = g if v is None else config.momentum * v + g
        velocity[name] = v
        params.tensors[name] = (p - lr * v).astype(p.dtype, copy=False)
    return params, velocity


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def stack_regions(samples: Sequence):
    """RegionSamples -> (images, grids, masks) arrays."""
    images = np.stack([s.image for s in samples])
    grids = np.stack([s.expression.values for s in samples])
    masks = np.stack([s.expression.valid_mask for s in samples])
    return images, grids, masks


def expression_embeddings(params: ModelParams, grids: np.ndarray) -> np.ndarray:
    """Frozen-encoder embeddings of every cell: (N, C, H', W') -> (N, d, H', W')."""
    z = encode_expression(params, grids.transpose(0, 2, 3, 1))
    return z.transpose(0, 3, 1, 2)


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    dtype = params["out.w"].dtype
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(params, images[i:i + batch_size].astype(dtype, copy=False)).pred)
    if not out:
        c, s = params.config.gene_count, params.config.output_px
        return np.zeros((0, c, s, s), dtype=dtype)
    return np.concatenate(out)


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    l_reg: float
    l_contrast: float
    l_total: float
    lr: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l_reg: float
    l_contrast: float
    l_total: float
    lr: float
    seconds: float
    test_mse: float | None = None


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_params: ModelParams | None = None
    stopped_early: bool = False


def _batch_losses(params, x, y, m, z, loss_cfg: LossConfig, contrastive: bool):
    acts = forward(params, x)
    l_reg, g_pred = regression_loss_grad(acts.pred, y, m)
    l_con, g_emb = 0.0, None
    if contrastive and (m.reshape(len(m), -1).sum(axis=1) >= 2).any():
        l_con, g_emb = contrastive_loss_grad(acts.img_embeddings, z, m, loss_cfg)
        g_emb = loss_cfg.lam * g_emb
    grads = backward(params, acts, g_pred, g_emb)
    return l_reg, l_con, grads


def train(
    params: ModelParams,
    samples: Sequence,
    config: TrainConfig,
    test_samples: Sequence | None = None,
    contrastive: bool = True,
):
    """Train ``params`` in place on RegionSamples; returns ``(params, TrainLog)``.

    Each epoch visits the training regions in a seeded random order. Training
    stops when the epoch budget is spent or when ``l_total`` has improved by
    less than ``min_rel_improvement`` (relative) for ``patience`` consecutive
    epochs. With ``test_samples`` the parameters scoring the lowest test MSE are
    kept in ``log.best_params``. ``contrastive=False`` trains on the regression
    loss alone and logs ``l_contrast`` as 0.
    """
    if config.epochs == 0:
        return params, TrainLog()
    if not samples:
        raise ValueError("training needs at least one sample")
    eval_set = stack_regions(test_samples) if test_samples else None
    return train_arrays(params, *stack_regions(samples), config, eval_set, contrastive)


def train_arrays(
    params: ModelParams,
    images: np.ndarray,
    grids: np.ndarray,
    masks: np.ndarray,
    config: TrainConfig,
    eval_set: tuple | None = None,
    contrastive: bool = True,
):
    """Array form of :func:`train`; ``eval_set`` is ``(images, grids, masks)``."""
    log = TrainLog()
    if config.epochs == 0:
        return params, log
    if len(images) == 0:
        raise ValueError("training needs at least one sample")
    dtype = params["out.w"].dtype
    x_all = images.astype(dtype, copy=False)
    y_all = grids.astype(dtype, copy=False)
    m_all = masks.astype(bool, copy=False)
    z_all = expression_embeddings(params, y_all)
    has_eval = eval_set is not None
    if has_eval:
        x_test, y_test, m_test = eval_set
        x_test = x_test.astype(dtype, copy=False)

    n = len(x_all)
    bs = config.batch_size
    per_epoch = math.ceil(n / bs)
    total_steps = config.epochs * per_epoch
    rng = np.random.default_rng(config.seed)
    velocity: dict = {}
    step = 0
    best_total = math.inf
    stale = 0
    best_mse = math.inf
    lam = config.loss.lam

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = np.zeros(3)
        for b in range(per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            lr = cosine_lr(step, total_steps, config)
            l_reg, l_con, grads = _batch_losses(
                params, x_all[idx], y_all[idx], m_all[idx], z_all[idx], config.loss, contrastive
            )
            l_total = l_reg + lam * l_con
            if not math.isfinite(l_total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(l_reg={l_reg}, l_contrast={l_con}) on regions {idx.tolist()}"
                )
            sgd_step(params, grads, velocity, lr, config)
            log.steps.append(StepRecord(epoch, step, l_reg, l_con, l_total, lr))
            sums += (l_reg, l_con, l_total)
            step += 1
        means = sums / per_epoch
        test_mse = None
        if has_eval:
            pred = predict(params, x_test, bs)
            test_mse, _ = regression_loss_grad(pred, y_test, m_test)
            if test_mse < best_mse:
                best_mse = test_mse
                log.best_epoch = epoch
                log.best_params = params.copy()
        log.epochs.append(EpochRecord(
            epoch, float(means[0]), float(means[1]), float(means[2]),
            log.steps[-1].lr, time.perf_counter() - t0, test_mse,
        ))
        logger.info("epoch %d l_reg=%.5f l_contrast=%.5f l_total=%.5f",
                    epoch, means[0], means[1], means[2])

        if best_total < math.inf and (best_total - means[2]) < config.min_rel_improvement * abs(best_total):
            stale += 1
        else:
            stale = 0
        best_total = min(best_total, means[2])
        if stale >= config.patience:
            log.stopped_early = True
            break
    if log.best_params is None:
        log.best_params = params.copy()
        log.best_epoch = log.epochs[-1].epoch
    return params, log


def write_trainlog_csv(log: TrainLog, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "l_reg", "l_contrast", "l_total", "lr", "seconds"])
        for e in log.epochs:
            w.writerow([e.epoch, repr(e.l_reg), repr(e.l_contrast), repr(e.l_total),
                        repr(e.lr), f"{e.seconds:.6f}"])


def train_spots(params: ModelParams, images: np.ndarray, targets: np.ndarray, config: TrainConfig):
    """Train the one-to-one spot regressor with MSE; same optimiser and schedule as :func:`train`."""
    log = TrainLog()
    if config.epochs == 0:
        return params, log
    if len(images) == 0:
        raise ValueError("training needs at least one sample")
    dtype = params["spot.w"].dtype
    images = images.astype(dtype, copy=False)
    targets = targets.astype(dtype, copy=False)
    n = len(images)
    bs = config.batch_size
    per_epoch = math.ceil(n / bs)
    total_steps = config.epochs * per_epoch
    rng = np.random.default_rng(config.seed)
    velocity: dict = {}
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for b in range(per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            lr = cosine_lr(step, total_steps, config)
            pred, cache = spot_forward(params, images[idx])
            diff = pred - targets[idx]
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}")
            grads = spot_backward(params, cache, (2.0 / diff.size) * diff)
            sgd_step(params, grads, velocity, lr, config)
            log.steps.append(StepRecord(epoch, step, loss, 0.0, loss, lr))
            total += loss
            step += 1
        mean = total / per_epoch
        log.epochs.append(EpochRecord(epoch, mean, 0.0, mean, lr, time.perf_counter() - t0))
    return params, log
