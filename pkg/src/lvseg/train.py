"""Training configuration and the two gradient-descent drivers used by every stage."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import Diverged, InvalidSpec
from .numerics import LossConfig, Network, network_loss, sgd_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 50
    batch_size: int = 20
    seed: int = 0
    loss_mode: str = "composite"
    init_scheme: str = "zeros"
    depth: str = "one_conv"
    width: int = 100
    activation: str = "sigmoid"
    pooling: str = "average"
    stop_tolerance: float = 1e-6
    stop_window: int = 5
    checkpoint_interval: int = 10
    finetune: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise InvalidSpec("learning_rate > 0, epochs >= 0 and batch_size >= 1 required")
        if self.stop_window < 0:
            raise InvalidSpec("stop_window must be >= 0")
        if self.loss_mode not in ("composite", "mse_only"):
            raise InvalidSpec(f"unknown loss mode {self.loss_mode!r}")
        if self.init_scheme not in ("zeros", "normal", "uniform"):
            raise InvalidSpec(f"unknown init scheme {self.init_scheme!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class Schedule:
    """Full-batch descent schedule used for unsupervised pretraining."""

    iterations: int = 400
    learning_rate: float = 1.0
    checkpoint_every: int = 20
    seed: int = 0


@dataclass
class FitResult:
    losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    final_learning_rate: float = 0.0


def glorot_uniform(rng, n_in, n_out, shape):
    r = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-r, r, size=shape)


def _snapshot(net):
    return {k: v.copy() for k, v in net.named_params().items()}


def full_batch_descent(net: Network, x, target, cfg: LossConfig, schedule: Schedule,
                       sparse_layers=()) -> FitResult:
    """Monotone full-batch gradient descent with an adaptive step.

    A step that raises the loss is undone and the step size halved; an
    accepted step grows it by 10%. The recorded loss sequence is therefore
    non-increasing.
    """
    lr = schedule.learning_rate
    res = FitResult()
    loss = network_loss(net, x, target, cfg, sparse_layers).total
    if not math.isfinite(loss):
        raise Diverged("initial loss is not finite")
    grads = {k: v.copy() for k, v in net.named_grads().items()}
    res.losses.append(loss)
    res.checkpoints.append(loss)
    for it in range(1, schedule.iterations + 1):
        before = _snapshot(net)
        net.set_params(sgd_step(before, grads, lr))
        try:
            new_loss = network_loss(net, x, target, cfg, sparse_layers).total
        except (FloatingPointError, ValueError):
            new_loss = math.inf
        if math.isfinite(new_loss) and new_loss <= loss:
            loss = new_loss
            grads = {k: v.copy() for k, v in net.named_grads().items()}
            lr *= 1.1
        else:
            net.set_params(before)
            lr *= 0.5
            if lr < 1e-12:
                break
        res.losses.append(loss)
        if it % schedule.checkpoint_every == 0:
            res.checkpoints.append(loss)
    if res.checkpoints[-1] != loss:
        res.checkpoints.append(loss)
    res.final_learning_rate = lr
    return res


def minibatch_sgd(net: Network, x, target, cfg: TrainConfig, loss_cfg: LossConfig = None,
                  sparse_layers=(), callback=None) -> FitResult:
    """Shuffled minibatch SGD with windowed early stopping.

    One loss value per epoch is recorded (the mean over its minibatches).
    Training stops once the loss improved by less than ``stop_tolerance``
    over the last ``stop_window`` epochs; a window of 0 disables stopping.
    """
    loss_cfg = loss_cfg or LossConfig(mode="mse_only")
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    res = FitResult()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = network_loss(net, x[idx], target[idx], loss_cfg, sparse_layers).total
            if not math.isfinite(loss):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            total += loss * len(idx)
            net.set_params(sgd_step(net.named_params(), net.named_grads(), cfg.learning_rate))
        res.losses.append(total / n)
        log.debug("epoch %d loss %.6g", epoch, res.losses[-1])
        if callback is not None:
            callback(epoch, res.losses[-1])
        w = cfg.stop_window
        if w and len(res.losses) > w and res.losses[-w - 1] - res.losses[-1] < cfg.stop_tolerance:
            break
    res.final_learning_rate = cfg.learning_rate
    return res
