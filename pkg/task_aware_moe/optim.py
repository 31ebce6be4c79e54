#!/usr/bin/env python3
"""
AdamW and the cosine learning-rate schedule
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from task_aware_moe.errors import ConfigError, ContractError
from task_aware_moe.tensor import Tensor

logger = logging.getLogger("task_aware_moe.optim")

ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    """First/second moments keyed by parameter name, plus the step counter"""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 · ½(1 + cos(π·step/total)), floored at 0"""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1", keys=["steps"])
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return max(0.0, lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


def adamw_step(params: Dict[str, Tensor], state: OptimizerState, lr: float,
               betas: Tuple[float, float] = (0.9, 0.95), weight_decay: float = 0.0, eps: float = ADAM_EPS) -> None:
    """
    One decoupled-weight-decay Adam update, in place.

    Args:
        params: trainable tensors by name; each must hold a gradient
        state: moments, updated in place
        lr: learning rate for this step
        betas: (β1, β2)
        weight_decay: decoupled decay coefficient
        eps: denominator epsilon

    Raises:
        ContractError: if a trainable parameter has no gradient
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"missing gradient for trainable parameters: {', '.join(sorted(missing)[:5])}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != p.data.shape:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p.data = p.data - lr * weight_decay * p.data
        p.data = p.data - lr * update


class AdamW:
    """Holds the parameter set and state so training loops can just call ``step``"""

    def __init__(self, params: Dict[str, Tensor], betas: Tuple[float, float] = (0.9, 0.95),
                 weight_decay: float = 0.0, eps: float = ADAM_EPS):
        self.params = params
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = OptimizerState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        adamw_step(self.params, self.state, lr, self.betas, self.weight_decay, self.eps)
