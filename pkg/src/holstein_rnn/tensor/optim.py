from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import HolsteinError, InvalidInputError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class AdamW:
    """Adam with decoupled weight decay.

    Each step applies w <- w - lr*wd*w - lr*m_hat/(sqrt(v_hat)+eps), both
    terms evaluated at the pre-step weights.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.state = OptimizerState(
            lr, betas[0], betas[1], eps, weight_decay,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def step(self, lr=None):
        adamw_step(self.params, self.state, lr)


def adamw_step(params, state: OptimizerState, lr=None):
    lr = state.lr if lr is None else lr
    for p in params:
        if p.grad is None:
            raise HolsteinError(f"parameter {p.name or p.shape} has no gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - lr * state.weight_decay * p.data - lr * update).astype(p.data.dtype)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None))


def clip_gradients(params, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the factor."""
    total = global_grad_norm(params)
    if total <= max_norm or total == 0.0:
        return 1.0
    factor = max_norm / total
    for p in params:
        if p.grad is not None:
            p.grad = (p.grad * factor).astype(p.grad.dtype)
    return factor


@dataclass
class LrSchedule:
    """Cosine annealing with warm restarts and a linear warm-up in every cycle."""

    lr_max: float = 1e-3
    lr_min: float = 1e-5
    warmup_steps: int = 200
    cycle_lengths: list[int] = field(default_factory=lambda: [1000])

    def __post_init__(self):
        if self.lr_min < 0 or self.lr_max < self.lr_min:
            raise InvalidInputError("need 0 <= lr_min <= lr_max")
        if any(c < 1 for c in self.cycle_lengths):
            raise InvalidInputError("cycle lengths must be positive")

    def cycle_starts(self):
        return list(np.cumsum([0] + list(self.cycle_lengths[:-1])))


def lr_at(step: int, schedule: LrSchedule) -> float:
    if step < 0:
        raise InvalidInputError("step must be non-negative")
    start = 0
    for length in schedule.cycle_lengths:
        if step < start + length:
            return _cycle_lr(step - start, length, schedule)
        start += length
    return schedule.lr_min


def _cycle_lr(s, length, sch: LrSchedule):
    warm = min(sch.warmup_steps, length - 1)
    if s < warm:
        return sch.lr_max * s / warm
    span = length - 1 - warm
    tau = 1.0 if span <= 0 else (s - warm) / span
    return sch.lr_min + 0.5 * (sch.lr_max - sch.lr_min) * (1.0 + math.cos(math.pi * tau))
