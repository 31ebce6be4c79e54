#!/usr/bin/env python3
"""
Hierarchical Expert Routing

Two routers work in sequence. The task-aware router is a hard two-way
classifier over task groups; its argmax is detached and the router is
trained only through the group loss. Inside the chosen group the
dynamic-assignment router scores the group's experts, keeps the top-k and
renormalizes the kept scores into gate weights.

Group labels are 1-based (1 = understanding, 2 = generation) wherever they
are exposed; expert indices are 0-based within a group.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Sequence

import numpy as np

from task_aware_moe import functional as F
from task_aware_moe.errors import ConfigError, ContractError, DimensionError
from task_aware_moe.params import ParameterTree
from task_aware_moe.tensor import Tensor, randn, zeros

logger = logging.getLogger("task_aware_moe.router")

NUM_TASK_GROUPS = 2


class TaskGroup(IntEnum):
    """Ground-truth task groups"""
    UNDERSTANDING = 1
    GENERATION = 2


@dataclass
class TaskRouterParams(ParameterTree):
    """Linear(x) = x·W_taskᵀ + b_task with W_task: Tensor[2×d], b_task: Tensor[2]"""
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d_model: int, rng: np.random.Generator, std: float = 0.02) -> "TaskRouterParams":
        return cls(weight=randn(rng, (NUM_TASK_GROUPS, d_model), std),
                   bias=zeros((NUM_TASK_GROUPS,), requires_grad=True))


@dataclass
class GroupAssignment:
    """Outcome of the task-aware router for n tokens"""
    group: np.ndarray          # int[n], values in {1, 2}
    logits: Tensor             # Tensor[n×2], still on the tape
    probabilities: Tensor      # Tensor[n×2]


@dataclass
class ExpertSelection:
    """Top-k choice for one token inside one group"""
    selected: List[int]
    gate_weights: List[float]
    all_scores: Tensor


def task_route(x: Tensor, params: TaskRouterParams) -> GroupAssignment:
    """
    Assign every token to a task group.

    Args:
        x: Tensor[n×d] token representations
        params: router weights

    Returns:
        GroupAssignment; ties go to group 1
    """
    if x.ndim != 2 or x.shape[1] != params.weight.shape[1]:
        raise DimensionError("task_route input width does not match the router", shapes=[x.shape, params.weight.shape])
    logits = F.add_bias(F.matmul(x, F.transpose(params.weight)), params.bias)
    probs = F.softmax(logits, axis=1)
    group = np.argmax(probs.data, axis=1).astype(np.int64) + 1
    return GroupAssignment(group=group, logits=logits, probabilities=probs)


def group_loss(assignments: Sequence[GroupAssignment], g_star: Sequence[int]) -> Tensor:
    """
    Cross-entropy of router logits against ground-truth groups.

    Args:
        assignments: one GroupAssignment per MoE layer, all over the same tokens
        g_star: per-token ground-truth group in {1, 2}

    Returns:
        Scalar tensor averaged over tokens and layers
    """
    if not assignments:
        raise ContractError("group_loss needs at least one routed layer")
    labels = np.asarray(g_star, dtype=np.int64).reshape(-1)
    if np.any((labels < 1) | (labels > NUM_TASK_GROUPS)):
        raise ContractError(f"g_star must lie in {{1, {NUM_TASK_GROUPS}}}")
    total: Optional[Tensor] = None
    for assignment in assignments:
        layer_loss = F.cross_entropy(assignment.logits, labels - 1)
        total = layer_loss if total is None else F.add(total, layer_loss)
    return F.mul(total, 1.0 / len(assignments))


def broadcast_labels(lengths: Sequence[int], labels: Sequence[int]) -> np.ndarray:
    """Repeat each sample's label over its tokens"""
    return np.repeat(np.asarray(labels, dtype=np.int64), np.asarray(lengths, dtype=np.int64))


def top_k_experts(probs: np.ndarray, k: int) -> np.ndarray:
    """
    Indices of the k largest entries per row, largest first; ties keep the lower index.

    Args:
        probs: float[n×e]
        k: number of experts to keep

    Returns:
        int[n×k]
    """
    e = probs.shape[-1]
    if not 1 <= k <= e:
        raise ConfigError(f"top-k needs 1 <= k <= e, got k={k}, e={e}", keys=["moe.top_k"])
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def renormalized_gates(probs: np.ndarray, selected: np.ndarray) -> np.ndarray:
    """Selected scores divided by their sum; exactly 1.0 when k == 1"""
    if selected.shape[-1] == 1:
        return np.ones(selected.shape)
    picked = np.take_along_axis(probs, selected, axis=-1)
    return picked / picked.sum(axis=-1, keepdims=True)


def dynamic_route(x: Tensor, group: int, scores: Sequence[Tensor], k: int) -> ExpertSelection:
    """
    Pick the top-k experts of ``group`` for a single token.

    Args:
        x: Tensor[d] token representation
        group: 1-based group index
        scores: per-group expert score matrices, each Tensor[e×d]
        k: experts to keep

    Returns:
        ExpertSelection with renormalized gate weights
    """
    if not 1 <= group <= len(scores):
        raise ContractError(f"group {group} outside [1, {len(scores)}]")
    w = scores[group - 1]
    if x.shape != (w.shape[1],):
        raise DimensionError("dynamic_route token width does not match the score matrix", shapes=[x.shape, w.shape])
    row = F.reshape(x, (1, x.shape[0]))
    probs = F.softmax(F.matmul(row, F.transpose(w)), axis=1)
    selected = top_k_experts(probs.data, k)
    gates = renormalized_gates(probs.data, selected)
    return ExpertSelection(selected=[int(i) for i in selected[0]],
                           gate_weights=[float(g) for g in gates[0]],
                           all_scores=F.reshape(probs, (w.shape[0],)))
