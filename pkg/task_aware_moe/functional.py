#!/usr/bin/env python3
"""
Differentiable Operations

Every op takes Tensors, computes its forward value with numpy and registers
a backward rule through ``make_result``. Broadcasting is limited to a
single-element operand against any shape; all row-wise combinations are
spelled out (``add_bias``, ``scale_rows``).
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from task_aware_moe.errors import ContractError, DimensionError, EmptyReductionError, TokenRangeError
from task_aware_moe.tensor import Tensor, as_tensor, make_result

logger = logging.getLogger("task_aware_moe.functional")

Operand = Union[Tensor, float, int]

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Undo scalar broadcasting for a gradient"""
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: operands must share a shape or one must be a scalar",
                             shapes=[a.shape, b.shape])


def _out_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    return b.shape if a.size == 1 else a.shape


# ----------------------------------------------------------------------
# Elementwise

def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    shape = _out_shape(a, b)
    data = (a.data.reshape(()) if a.size == 1 and a.shape != shape else a.data) + \
        (b.data.reshape(()) if b.size == 1 and b.shape != shape else b.data)

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(_reduce_to(g, a.shape))
        b.accumulate_grad(_reduce_to(g, b.shape))

    return make_result(data, (a, b), backward, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    shape = _out_shape(a, b)
    data = (a.data.reshape(()) if a.size == 1 and a.shape != shape else a.data) - \
        (b.data.reshape(()) if b.size == 1 and b.shape != shape else b.data)

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(_reduce_to(g, a.shape))
        b.accumulate_grad(_reduce_to(-g, b.shape))

    return make_result(data, (a, b), backward, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    shape = _out_shape(a, b)
    ad = a.data.reshape(()) if a.size == 1 and a.shape != shape else a.data
    bd = b.data.reshape(()) if b.size == 1 and b.shape != shape else b.data
    data = ad * bd

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * bd, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * ad, b.shape))

    return make_result(data, (a, b), backward, "mul")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    data = 0.5 * xd * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * d_inner
        x.accumulate_grad(g * local)

    return make_result(data, (x,), backward, "gelu")


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """
    Normalize over the last axis, then apply optional gain and bias.

    Args:
        x: Tensor[..., d]
        gain: Tensor[d] or None
        bias: Tensor[d] or None
        eps: variance epsilon

    Returns:
        Tensor shaped like x
    """
    d = x.shape[-1]
    for p, label in ((gain, "gain"), (bias, "bias")):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm {label} must match the last axis", shapes=[x.shape, p.shape])
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat
    if gain is not None:
        data = data * gain.data
    if bias is not None:
        data = data + bias.data
    parents = tuple(p for p in (x, gain, bias) if p is not None)

    def backward(g: np.ndarray) -> None:
        gxhat = g * gain.data if gain is not None else g
        if x.requires_grad:
            mean_g = gxhat.mean(axis=-1, keepdims=True)
            mean_gx = (gxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv_std * (gxhat - mean_g - xhat * mean_gx))
        if gain is not None and gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))

    return make_result(data, parents, backward, "layer_norm")


# ----------------------------------------------------------------------
# Linear algebra and shape plumbing

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of Tensor[m×k] and Tensor[k×n]"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul inner extents do not match", shapes=[a.shape, b.shape])
    data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return make_result(data, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("transpose needs a matrix", shapes=[x.shape])

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(g.T)

    return make_result(x.data.T.copy(), (x,), backward, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError("reshape must preserve the element count", shapes=[x.shape, shape])

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(g.reshape(x.shape))

    return make_result(x.data.reshape(shape).copy(), (x,), backward, "reshape")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add Tensor[m] to every row of Tensor[n×m]"""
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError("add_bias needs Tensor[n×m] and Tensor[m]", shapes=[x.shape, bias.shape])

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(g)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return make_result(x.data + bias.data, (x, bias), backward, "add_bias")


def scale_rows(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply row i of Tensor[n×m] by weights[i]"""
    if x.ndim != 2 or weights.shape != (x.shape[0],):
        raise DimensionError("scale_rows needs Tensor[n×m] and Tensor[n]", shapes=[x.shape, weights.shape])
    w = weights.data[:, None]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * w)
        if weights.requires_grad:
            weights.accumulate_grad((g * x.data).sum(axis=1))

    return make_result(x.data * w, (x, weights), backward, "scale_rows")


def take_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows; repeated indices accumulate on the way back"""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise TokenRangeError(f"row index outside [0, {x.shape[0]})")

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x.accumulate_grad(full)

    return make_result(x.data[idx], (x,), backward, "take_rows")


def scatter_add_rows(base: Tensor, index: Sequence[int], src: Tensor) -> Tensor:
    """Return ``base`` with ``src`` rows added at ``index``"""
    idx = np.asarray(index, dtype=np.int64)
    if src.ndim != 2 or base.ndim != 2 or src.shape != (idx.size, base.shape[1]):
        raise DimensionError("scatter_add_rows source must be Tensor[len(index)×m]",
                             shapes=[base.shape, src.shape])
    data = base.data.copy()
    np.add.at(data, idx, src.data)

    def backward(g: np.ndarray) -> None:
        base.accumulate_grad(g)
        if src.requires_grad:
            src.accumulate_grad(g[idx])

    return make_result(data, (base, src), backward, "scatter_add_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range", shapes=[x.shape])

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x.accumulate_grad(full)

    return make_result(x.data[:, start:stop].copy(), (x,), backward, "slice_cols")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t.accumulate_grad(np.take(g, np.arange(lo, hi), axis=axis))

    return make_result(data, tensors, backward, "concat")


# ----------------------------------------------------------------------
# Reductions and normalizations

def sum_all(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(np.full(x.shape, float(g.reshape(-1)[0])))

    return make_result(np.array(x.data.sum()), (x,), backward, "sum")


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise EmptyReductionError("mean of an empty tensor")
    n = x.size

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(np.full(x.shape, float(g.reshape(-1)[0]) / n))

    return make_result(np.array(x.data.mean()), (x,), backward, "mean")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``"""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return make_result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return make_result(y, (x,), backward, "log_softmax")


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """
    Row softmax over the entries where ``mask`` is True; masked entries are 0.

    Every row must keep at least one visible entry.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape or x.ndim != 2:
        raise DimensionError("masked_softmax mask must match a 2-D input", shapes=[x.shape, mask.shape])
    if not mask.any(axis=1).all():
        raise EmptyReductionError("masked_softmax row with no visible entries")
    visible = np.where(mask, x.data, -np.inf)
    e = np.exp(visible - visible.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(y * (g - (g * y).sum(axis=1, keepdims=True)))

    return make_result(y, (x,), backward, "masked_softmax")


def normalize_rows(x: Tensor) -> Tensor:
    """Divide each row of a non-negative matrix by its sum"""
    if x.ndim != 2:
        raise DimensionError("normalize_rows needs a matrix", shapes=[x.shape])
    s = x.data.sum(axis=1, keepdims=True)
    if np.any(s == 0.0):
        raise EmptyReductionError("normalize_rows row sums to zero")
    y = x.data / s

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad((g - (g * y).sum(axis=1, keepdims=True)) / s)

    return make_result(y, (x,), backward, "normalize_rows")


# ----------------------------------------------------------------------
# Losses

def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Optional[Sequence[float]] = None) -> Tensor:
    """
    Masked mean of -log softmax(logits)[target].

    Args:
        logits: Tensor[n×V]
        targets: n class indices in [0, V)
        mask: n weights in {0, 1}; defaults to all ones

    Returns:
        Scalar tensor

    Raises:
        EmptyReductionError: if the mask selects nothing
        TokenRangeError: if a target lies outside [0, V)
    """
    if logits.ndim != 2:
        raise DimensionError("cross_entropy needs Tensor[n×V] logits", shapes=[logits.shape])
    n, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    if tgt.shape[0] != n or m.shape[0] != n:
        raise DimensionError("targets and mask must have one entry per logits row",
                             shapes=[logits.shape, tgt.shape, m.shape])
    total = m.sum()
    if total <= 0:
        raise EmptyReductionError("cross_entropy over an all-zero mask")
    active = m > 0
    if np.any((tgt[active] < 0) | (tgt[active] >= vocab)):
        raise TokenRangeError(f"cross_entropy target outside [0, {vocab})")
    safe_tgt = np.where(active, tgt, 0)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    picked = logp[np.arange(n), safe_tgt]
    loss = -(m * picked).sum() / total

    def backward(g: np.ndarray) -> None:
        probs = np.exp(logp)
        probs[np.arange(n), safe_tgt] -= 1.0
        logits.accumulate_grad(float(g.reshape(-1)[0]) * probs * (m / total)[:, None])

    return make_result(np.array(loss), (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean of squared differences over all elements"""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError("mse operands must share a shape", shapes=[pred.shape, target.shape])
    if pred.size == 0:
        raise EmptyReductionError("mse of empty tensors")
    diff = pred.data - target.data
    n = pred.size

    def backward(g: np.ndarray) -> None:
        local = 2.0 * float(g.reshape(-1)[0]) * diff / n
        pred.accumulate_grad(local)
        target.accumulate_grad(-local)

    return make_result(np.array((diff ** 2).mean()), (pred, target), backward, "mse")
