"""Adam with decoupled weight decay, cosine annealing and Xavier init."""
from __future__ import annotations

import math
from collections.abc import Iterable, Sequence

import numpy as np

from .layers import Parameter

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adam_step(params: Iterable[Parameter], lr: float, weight_decay: float, t: int,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS) -> None:
    """One bias-corrected Adam update; decay is applied to the weights directly.

    Non-trainable parameters are skipped entirely, moments included.
    """
    if t < 1:
        raise ValueError(f"step counter t must be >= 1, got {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / c1
        v_hat = p.adam_v / c2
        update = lr * (m_hat / (np.sqrt(v_hat) + eps))
        if weight_decay:
            update += (lr * weight_decay) * p.value
        p.value -= update.astype(np.float32)


class Adam:
    """Adam over named parameter groups, each with its own base learning rate."""

    def __init__(self, groups: dict[str, tuple[Sequence[Parameter], float]],
                 weight_decay: float = 0.0):
        self.groups = {name: (list(ps), lr) for name, (ps, lr) in groups.items()}
        self.weight_decay = weight_decay
        self.t = 0

    def zero_grad(self) -> None:
        for ps, _ in self.groups.values():
            for p in ps:
                p.zero_grad()

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        for ps, lr in self.groups.values():
            adam_step(ps, lr * lr_scale, self.weight_decay, self.t)


def cosine_annealing_lr(lr_max: float, lr_min: float, epoch: int, total: int) -> float:
    if total <= 0:
        raise ValueError("total epochs must be positive")
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    if lr_min > lr_max:
        raise ValueError("lr_min must not exceed lr_max")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total))


def xavier_init(param: Parameter, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    """Fill ``param`` with U(-a, a), a = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    a = math.sqrt(6.0 / (fan_in + fan_out))
    param.value[...] = rng.uniform(-a, a, size=param.shape).astype(np.float32)
