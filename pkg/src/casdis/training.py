"""Mini-batch Adam training with plateau learning-rate decay and early stop.

The per-cascade loss is the sum of its step losses; the batch objective is
the mean over all steps in the batch, realized by seeding each cascade's
backward pass with 1/steps so gradients accumulate to the batch mean.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .data import DatasetSplit, make_batches
from .model import (
    DegenerateCascadeError,
    GumbelConfig,
    ModelParams,
    forward_cascade,
    init_params,
)
from .numerics import RngState

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 0.005
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    lr_decay_factor: float = 0.5
    lr_patience: int = 2
    dropout_rate: float = 1e-4
    tau: float = 1.0
    gumbel_enabled: bool = True
    seed: int = 1
    k: int = 4
    d: int = 64
    max_len: int = 200
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.lr_init <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("lr_init, batch_size and max_epochs must be positive")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError(f"lr_decay_factor must be in (0,1), got {self.lr_decay_factor}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


class NonFiniteGradientError(RuntimeError):
    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient in parameter '{param_name}'")
        self.param_name = param_name


@dataclass
class OptimizerState:
    """Adam accumulators (beta1=0.9, beta2=0.999, eps=1e-8) plus the
    current learning rate."""

    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def for_params(params: ModelParams, lr: float) -> "OptimizerState":
        state = OptimizerState(lr=lr)
        for name, p in params.named_parameters():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(opt: OptimizerState, params: ModelParams, lr: float) -> None:
    """One bias-corrected Adam update from the accumulated gradients;
    gradients are reset afterwards."""
    for name, p in params.named_parameters():
        if not np.isfinite(p.grad).all():
            raise NonFiniteGradientError(name)
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for name, p in params.named_parameters():
        g = p.grad
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[name] / c1
        v_hat = opt.v[name] / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    params.reset_gradients()


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.parameters()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for p in params.parameters():
            p.grad *= factor
    return total


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams          # best-validation checkpoint
    log: List[EpochStats]
    best_valid_loss: Optional[float]
    stopped: str                 # "max_epochs" | "early_stop" | "diverged" | "nan_gradient:<name>"


def mean_step_loss(
    params: ModelParams,
    cascades,
    max_len: int = 200,
) -> float:
    """Evaluation-mode loss per prediction step (no noise, no dropout)."""
    total, steps = 0.0, 0
    for cascade in cascades:
        c = cascade[:max_len]
        if len(c) < 2:
            continue
        out = forward_cascade(params, c, training=False)
        total += float(out.step_losses.sum())
        steps += len(out.step_losses)
    if steps == 0:
        raise ValueError("no prediction points in cascade set")
    return total / steps


def train(config: TrainConfig, split: DatasetSplit, num_nodes: int) -> TrainResult:
    """Train on ``split.train``, tracking validation loss per epoch.

    The learning rate is multiplied by ``lr_decay_factor`` after
    ``lr_patience`` consecutive epochs without validation improvement;
    training stops after ``patience`` such epochs, or on divergence, always
    returning the best-validation checkpoint seen.
    """
    if not split.train or not split.valid:
        raise ValueError("train and valid sets must be non-empty")

    init_rng = RngState.derive(config.seed, "init")
    gumbel_rng = RngState.derive(config.seed, "gumbel")
    dropout_rng = RngState.derive(config.seed, "dropout")
    shuffle_rng = RngState.derive(config.seed, "shuffle")

    params = init_params(num_nodes, config.d, config.k, init_rng)
    gumbel = GumbelConfig(tau=config.tau, enabled_in_training=config.gumbel_enabled, rng=gumbel_rng)
    opt = OptimizerState.for_params(params, lr=config.lr_init)

    best = params.clone()
    best_valid = math.inf
    stall = 0
    lr_stall = 0
    stats: List[EpochStats] = []
    stopped = "max_epochs"

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(split.train))
        ordered = [split.train[i] for i in order]
        batches = make_batches(ordered, config.batch_size, config.max_len, pad_index=num_nodes)

        loss_sum, step_count = 0.0, 0
        nan_param = None
        for batch in batches:
            params.reset_gradients()
            batch_steps = int(sum(max(l - 1, 0) for l in batch.lengths))
            if batch_steps == 0:
                continue
            for row in range(len(batch.lengths)):
                cascade = batch.cascade(row)
                try:
                    out = forward_cascade(
                        params,
                        cascade,
                        gumbel=gumbel,
                        training=True,
                        dropout_rate=config.dropout_rate,
                        dropout_rng=dropout_rng,
                    )
                except DegenerateCascadeError:
                    continue
                out.loss.backward(1.0 / batch_steps)
                loss_sum += float(out.step_losses.sum())
                step_count += len(out.step_losses)
            clip_gradients(params, config.clip_norm)
            try:
                adam_step(opt, params, opt.lr)
            except NonFiniteGradientError as err:
                nan_param = err.param_name
                break

        if nan_param is not None:
            log.error("epoch %d aborted: non-finite gradient in '%s'", epoch, nan_param)
            stopped = f"nan_gradient:{nan_param}"
            break

        train_loss = loss_sum / max(step_count, 1)
        valid_loss = mean_step_loss(params, split.valid, config.max_len)
        stats.append(EpochStats(epoch, train_loss, valid_loss, opt.lr, time.perf_counter() - t0))
        log.info(
            "epoch %d  train %.4f  valid %.4f  lr %.2e  (%.1fs)",
            epoch, train_loss, valid_loss, opt.lr, stats[-1].seconds,
        )

        if not math.isfinite(valid_loss):
            log.error("epoch %d aborted: validation loss diverged", epoch)
            stopped = "diverged"
            break

        if valid_loss < best_valid:
            best_valid = valid_loss
            best = params.clone()
            stall = 0
            lr_stall = 0
        else:
            stall += 1
            lr_stall += 1
            if lr_stall >= config.lr_patience:
                opt.lr *= config.lr_decay_factor
                lr_stall = 0
                log.info("epoch %d: validation plateau, lr -> %.2e", epoch, opt.lr)
            if stall >= config.patience:
                stopped = "early_stop"
                break

    return TrainResult(
        params=best,
        log=stats,
        best_valid_loss=None if math.isinf(best_valid) else best_valid,
        stopped=stopped,
    )


def write_train_log(path, stats: List[EpochStats]) -> None:
    """Line-oriented CSV: epoch, train loss, valid loss, lr, wall seconds."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,valid_loss,lr,seconds\n")
        for s in stats:
            fh.write(f"{s.epoch},{s.train_loss:.10f},{s.valid_loss:.10f},{s.lr:.10g},{s.seconds:.3f}\n")
