"""SGD with momentum, decoupled-free weight decay, linear warmup and a single
step decay."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .nn import Parameter
from .tensor import ContractError

WARMUP_START = 1e-3


@dataclass
class SgdConfig:
    learning_rate: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 1
    decay_epoch: int = 8
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("weight_decay and warmup_epochs must be nonnegative")
        if self.decay_epoch <= 0 or self.decay_factor <= 0:
            raise ValueError("decay_epoch and decay_factor must be positive")


def learning_rate(config: SgdConfig, epoch: float) -> float:
    """Learning rate at a (possibly fractional) zero-based epoch.

    Ramps linearly from ``WARMUP_START * lr`` to ``lr`` over the warmup
    epochs, then drops by ``decay_factor`` once ``epoch >= decay_epoch``.
    """
    lr = config.learning_rate
    if epoch < config.warmup_epochs:
        frac = epoch / config.warmup_epochs
        lr *= WARMUP_START + (1.0 - WARMUP_START) * frac
    if epoch >= config.decay_epoch:
        lr *= config.decay_factor
    return lr


def sgd_step(params: Iterable[Parameter], config: SgdConfig, epoch: float,
             velocity: dict | None = None) -> dict:
    """Apply ``v <- momentum*v + grad + wd*w; w <- w - lr(epoch)*v`` to every
    parameter. Velocities are keyed by ``id(param)``; pass the returned dict
    back in on the next call."""
    params = list(params)
    velocity = {} if velocity is None else velocity
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or '<unnamed>'} has no gradient")
    lr = learning_rate(config, epoch)
    for p in params:
        v = velocity.get(id(p))
        if v is None:
            v = velocity[id(p)] = np.zeros_like(p.data)
        v *= config.momentum
        v += p.grad + config.weight_decay * p.data
        p.data -= (lr * v).astype(p.data.dtype)
    return velocity


class Sgd:
    def __init__(self, params: Iterable[Parameter], config: SgdConfig):
        self.params = list(params)
        self.config = config
        self.velocity: dict = {}

    def step(self, epoch: float) -> float:
        sgd_step(self.params, self.config, epoch, self.velocity)
        return learning_rate(self.config, epoch)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)
