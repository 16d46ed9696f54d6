"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, ParameterError
from .tensor import Tensor


@dataclass
class OptimizerState:
    """Per-parameter moment buffers and the shared step counter."""

    lr: float = 4e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState, lr: float):
    """One decoupled-weight-decay Adam update over matching param/grad lists."""
    if lr <= 0:
        raise ParameterError(f"learning rate must be > 0, got {lr}")
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step_count
    bc2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise DimensionError(f"grad shape {g.shape} does not match param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        if state.weight_decay != 0.0:
            p.data -= (lr * state.weight_decay) * p.data
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


class AdamW:
    """Stateful wrapper binding an OptimizerState to a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 4e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)

    def step(self, lr: float | None = None):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.params, grads, self.state, lr if lr is not None else self.state.lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def cosine_decay_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr(t) = lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi t / total))."""
    if total_steps < 1:
        raise ParameterError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
