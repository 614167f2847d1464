"""AdamW with decoupled weight decay, plus the step-decay warmup schedule."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def adamw_step(
    params: Iterable[Parameter],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 1e-4,
    step_index: int = 1,
    eps: float = 1e-8,
) -> None:
    """One AdamW update on every parameter that has a gradient.

    ``step_index`` is 1-based and drives bias correction.  Gradients are
    cleared afterwards.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if step_index < 1:
        raise ValueError(f"step_index is 1-based, got {step_index}")
    beta1, beta2 = betas
    corr1 = 1.0 - beta1**step_index
    corr2 = 1.0 - beta2**step_index
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        p.exp_avg *= beta1
        p.exp_avg += (1.0 - beta1) * g
        p.exp_avg_sq *= beta2
        p.exp_avg_sq += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m_hat = p.exp_avg / corr1
        v_hat = p.exp_avg_sq / corr2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


def lr_at(step: int, total_steps: int, base_lr: float, warmup: int = 250,
          milestones: tuple[float, ...] = (0.9, 0.95), gamma: float = 0.1) -> float:
    """Linear warmup then x``gamma`` decay at each milestone fraction (0-based step)."""
    lr = base_lr
    if warmup > 0 and step < warmup:
        lr = base_lr * (step + 1) / warmup
    for frac in milestones:
        if step >= int(frac * total_steps):
            lr *= gamma
    return lr
