"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["OptimizerState", "cosine_lr", "adamw_step"]


@dataclass
class OptimizerState:
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    total_steps: int = 1
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def adamw_step(weights: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """One AdamW update, in place on ``weights`` (any mapping of arrays) and ``state``.

    w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if weights[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {weights[name].shape}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        w = weights[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * w
        weights[name] = (w - lr * update).astype(w.dtype, copy=False)
