"""SGD with Nesterov-free heavy-ball momentum and polynomial LR decay,
matching the standard nnU-Net-style segmentation recipe: base lr 0.01,
momentum 0.99, weight decay 3e-5, poly exponent 0.9.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .tensor import Tensor

POLY_EXPONENT = 0.9


@dataclass
class OptimizerConfig:
    initial_lr: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 3e-5
    max_epoch: int = 1000
    iters_per_epoch: int = 250
    batch_size: int = 2


def poly_lr(epoch: int, cfg: OptimizerConfig) -> float:
    """initial_lr * (1 - epoch / max_epoch) ** 0.9 evaluated at epoch start."""
    if not 0 <= epoch <= cfg.max_epoch:
        raise UsageError(f"epoch {epoch} outside [0, {cfg.max_epoch}]")
    return cfg.initial_lr * (1.0 - epoch / cfg.max_epoch) ** POLY_EXPONENT


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: dict[str, Tensor],
    state: SgdState,
    lr: float,
    cfg: OptimizerConfig,
) -> None:
    """In-place heavy-ball update: v <- m*v + (g + wd*p); p <- p - lr*v."""
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter '{name}'")
        upd = g + cfg.weight_decay * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = cfg.momentum * v + upd
        state.velocity[name] = v
        p.data -= (lr * v).astype(p.data.dtype)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
