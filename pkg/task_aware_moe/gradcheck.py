#!/usr/bin/env python3
"""
Finite-Difference Gradient Checking

Compares gradients from ``Tensor.backward`` with central differences,
coordinate by coordinate.
"""

import logging
from typing import Callable, Sequence

import numpy as np

from task_aware_moe.errors import ContractError
from task_aware_moe.tensor import Tensor, no_grad

logger = logging.getLogger("task_aware_moe.gradcheck")

MIN_EPS = 1e-7
MAX_EPS = 1e-3


def numeric_gradient(f: Callable[[], Tensor], tensor: Tensor, eps: float) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to ``tensor``"""
    if not tensor.data.flags.c_contiguous:
        tensor.data = np.ascontiguousarray(tensor.data)
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = f().item()
            flat[i] = original - eps
            f_minus = f().item()
            flat[i] = original
            out[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """
    Maximum relative error between analytic and numeric gradients.

    Args:
        f: closure returning a scalar Tensor built from ``inputs``
        inputs: leaf tensors to check; they are perturbed in place and restored
        eps: central-difference step, within [1e-7, 1e-3]

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |numeric|)
    """
    if not MIN_EPS <= eps <= MAX_EPS:
        raise ContractError(f"grad_check eps must lie in [{MIN_EPS}, {MAX_EPS}], got {eps}")
    for t in inputs:
        if not t.requires_grad:
            raise ContractError("grad_check inputs must require grad")
        t.grad = None

    loss = f()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        n = numeric_gradient(f, t, eps)
        err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
        if err.size:
            worst = max(worst, float(err.max()))
    logger.debug(f"grad_check over {len(inputs)} inputs: max relative error {worst:.3e}")
    return worst
