#!/usr/bin/env python3
"""
Task-Aware MoE Layer

Experts are split into two task groups (understanding, generation). Each
token is sent to one group by the task-aware router, to the top-k experts
of that group by the dynamic-assignment router, and the weighted expert
output is added to an always-on shared expert scaled by a learnable α.

Expert ids are global across groups: group g (1-based) owns ids
(g-1)·e .. g·e-1, so with e=2 experts 0,1 are the understanding group and
2,3 the generation group.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from task_aware_moe import functional as F
from task_aware_moe.errors import ConfigError, ContractError, DimensionError, EmptyReductionError
from task_aware_moe.lora import Weight, resolve_weight
from task_aware_moe.params import ParameterTree, static_field
from task_aware_moe.router import (
    NUM_TASK_GROUPS,
    GroupAssignment,
    TaskRouterParams,
    renormalized_gates,
    task_route,
    top_k_experts,
)
from task_aware_moe.tensor import Tensor, randn, zeros

logger = logging.getLogger("task_aware_moe.moe_layer")


@dataclass
class MoEConfig:
    """Shape and behavior of every MoE layer in a model"""
    experts_per_group: int = 2
    shared_experts: int = 1
    top_k: int = 1
    alpha_init: float = 0.2
    task_router: bool = True
    gate_full_softmax: bool = False
    force_group_by_label: bool = False
    router_init_std: float = 0.02
    perturb_scale: float = 0.01

    def validate(self) -> None:
        e, s = self.experts_per_group, self.shared_experts
        if e < 0 or s < 0:
            raise ConfigError("expert counts must be non-negative", keys=["moe.experts_per_group", "moe.shared_experts"])
        if e == 0 and s == 0:
            raise ConfigError("a layer needs at least one group or shared expert",
                              keys=["moe.experts_per_group", "moe.shared_experts"])
        pool = e if self.task_router else NUM_TASK_GROUPS * e
        if e > 0 and not 1 <= self.top_k <= pool:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, {pool}]", keys=["moe.top_k"])


@dataclass
class ExpertFFN(ParameterTree):
    """x → GELU(x·W1 + b1)·W2 + b2"""
    w1: Weight
    b1: Tensor
    w2: Weight
    b2: Tensor

    @classmethod
    def init(cls, d_model: int, d_hidden: int, rng: np.random.Generator, std: float = 0.02) -> "ExpertFFN":
        return cls(w1=randn(rng, (d_model, d_hidden), std),
                   b1=zeros((d_hidden,), requires_grad=True),
                   w2=randn(rng, (d_hidden, d_model), std),
                   b2=zeros((d_model,), requires_grad=True))

    @property
    def d_model(self) -> int:
        return self.w1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        hidden = F.gelu(F.add_bias(F.matmul(x, resolve_weight(self.w1)), self.b1))
        return F.add_bias(F.matmul(hidden, resolve_weight(self.w2)), self.b2)


@dataclass
class MoEParams(ParameterTree):
    """
    One task-aware MoE layer.

    ``task_router`` is None for the flat-pool baseline, which holds a single
    group. ``group_experts`` may hold empty groups for the shared-only layout.
    """
    task_router: Optional[TaskRouterParams]
    score_matrices: List[Tensor]
    group_experts: List[List[ExpertFFN]]
    shared_experts: List[ExpertFFN]
    alpha: Tensor
    top_k: int = static_field(1)
    gate_full_softmax: bool = static_field(False)
    force_group_by_label: bool = static_field(False)

    def __post_init__(self):
        if self.task_router is not None and len(self.group_experts) != NUM_TASK_GROUPS:
            raise ConfigError(f"a task-routed layer needs exactly {NUM_TASK_GROUPS} groups", keys=["moe.task_router"])
        sizes = {len(g) for g in self.group_experts}
        if len(sizes) > 1:
            raise ConfigError("every group must hold the same number of experts", keys=["moe.experts_per_group"])

    @property
    def experts_per_group(self) -> int:
        return len(self.group_experts[0]) if self.group_experts else 0

    @property
    def num_groups(self) -> int:
        return len(self.group_experts)

    @property
    def num_experts(self) -> int:
        return self.experts_per_group * self.num_groups


@dataclass
class RoutingRecord:
    """Routing outcome of one MoE layer over n tokens"""
    layer: int
    groups: np.ndarray                      # int[n], 1-based
    experts: np.ndarray                     # int[n×k], global expert ids
    gates: np.ndarray                       # float[n×k]
    num_experts: int
    experts_per_group: int
    expert_norms: np.ndarray                # float[n], ‖h_expert‖
    shared_norms: np.ndarray                # float[n], ‖α·SharedExpert(x)‖
    labels: Optional[np.ndarray] = None     # int[n] ground-truth groups when known
    assignment: Optional[GroupAssignment] = field(default=None, repr=False)

    @property
    def num_tokens(self) -> int:
        return int(self.groups.shape[0])


@dataclass
class ExpertLoadStats:
    """Per-layer share of token routings landing on each expert"""
    layers: List[int]
    loads: np.ndarray                       # float[L×E]
    token_counts: np.ndarray                # int[L]
    experts_per_group: int
    shared_ratio: np.ndarray                # float[L], mean ‖α·shared‖ / ‖h_expert‖
    routing_accuracy: Optional[np.ndarray] = None   # float[L]; None without a task router

    def group_load(self, group: int) -> np.ndarray:
        """Combined load of a 1-based group's experts, per layer"""
        e = self.experts_per_group
        return self.loads[:, (group - 1) * e: group * e].sum(axis=1)


def moe_forward(x: Tensor, params: MoEParams, group_labels: Optional[Sequence[int]] = None,
                layer: int = 0, route_by_label: bool = False) -> Tuple[Tensor, RoutingRecord]:
    """
    Route every token and combine expert outputs.

    Args:
        x: Tensor[n×d]
        params: the layer
        group_labels: optional per-token ground-truth groups, stored in the record
        layer: layer index stored in the record
        route_by_label: training only; with ``force_group_by_label`` set,
            tokens go to their labelled group instead of the router's pick

    Returns:
        (y: Tensor[n×d], RoutingRecord)
    """
    if x.ndim != 2:
        raise DimensionError("moe_forward needs Tensor[n×d]", shapes=[x.shape])
    n, d = x.shape
    experts_ref = params.group_experts[0][0] if params.experts_per_group else (
        params.shared_experts[0] if params.shared_experts else None)
    if experts_ref is None:
        raise ConfigError("MoE layer has no experts", keys=["moe.experts_per_group", "moe.shared_experts"])
    if experts_ref.d_model != d:
        raise DimensionError("moe_forward input width does not match the experts", shapes=[x.shape, experts_ref.w1.shape])

    labels = None if group_labels is None else np.asarray(group_labels, dtype=np.int64).reshape(-1)
    if labels is not None and labels.shape[0] != n:
        raise DimensionError("group_labels needs one entry per token", shapes=[(n,), labels.shape])

    assignment = None
    if params.task_router is not None:
        assignment = task_route(x, params.task_router)
        groups = assignment.group.copy()
        if route_by_label and params.force_group_by_label and labels is not None:
            groups = labels.copy()
    else:
        groups = np.ones(n, dtype=np.int64)

    e = params.experts_per_group
    k = params.top_k if e else 0
    selected = np.zeros((n, k), dtype=np.int64)
    gates = np.zeros((n, k))
    h = zeros((n, d))

    if e:
        for g, experts in enumerate(params.group_experts):
            rows = np.flatnonzero(groups == g + 1)
            if rows.size == 0:
                continue
            xg = F.take_rows(x, rows)
            probs = F.softmax(F.matmul(xg, F.transpose(params.score_matrices[g])), axis=1)
            sel = top_k_experts(probs.data, k)
            selected[rows] = sel + g * e
            gates[rows] = renormalized_gates(probs.data, sel)

            gate_tensor = None
            if params.gate_full_softmax:
                gate_tensor = probs
            elif k > 1:
                keep = np.zeros(probs.shape)
                np.put_along_axis(keep, sel, 1.0, axis=1)
                gate_tensor = F.normalize_rows(F.mul(probs, Tensor(keep)))

            for j, expert in enumerate(experts):
                local = np.flatnonzero((sel == j).any(axis=1))
                if local.size == 0:
                    continue
                out = expert.forward(F.take_rows(xg, local))
                if gate_tensor is not None:
                    w = F.reshape(F.slice_cols(F.take_rows(gate_tensor, local), j, j + 1), (local.size,))
                    out = F.scale_rows(out, w)
                h = F.scatter_add_rows(h, rows[local], out)

    y = h
    shared_norms = np.zeros(n)
    if params.shared_experts:
        shared: Optional[Tensor] = None
        for expert in params.shared_experts:
            out = expert.forward(x)
            shared = out if shared is None else F.add(shared, out)
        scaled = F.mul(shared, params.alpha)
        shared_norms = np.linalg.norm(scaled.data, axis=1)
        y = F.add(h, scaled)

    record = RoutingRecord(layer=layer, groups=groups, experts=selected, gates=gates,
                           num_experts=params.num_experts, experts_per_group=e,
                           expert_norms=np.linalg.norm(h.data, axis=1), shared_norms=shared_norms,
                           labels=labels, assignment=assignment)
    return y, record


def expert_load_stats(records: Sequence[RoutingRecord], task_filter: Optional[int] = None) -> ExpertLoadStats:
    """
    Aggregate routing records into per-layer expert load fractions.

    Args:
        records: records from any number of forward calls
        task_filter: keep only tokens whose ground-truth group equals this

    Returns:
        ExpertLoadStats; each layer's loads sum to 1 (shared expert excluded)
    """
    if not records:
        raise EmptyReductionError("expert_load_stats needs at least one routing record")
    layers = sorted({r.layer for r in records})
    num_experts = records[0].num_experts
    e = records[0].experts_per_group
    counts = np.zeros((len(layers), num_experts))
    tokens = np.zeros(len(layers), dtype=np.int64)
    correct = np.zeros(len(layers))
    labelled = np.zeros(len(layers))
    ratio_sum = np.zeros(len(layers))
    for record in records:
        li = layers.index(record.layer)
        keep = np.ones(record.num_tokens, dtype=bool)
        if task_filter is not None:
            if record.labels is None:
                raise ContractError("task_filter needs records carrying ground-truth labels")
            keep = record.labels == task_filter
        if not keep.any():
            continue
        tokens[li] += int(keep.sum())
        if num_experts:
            np.add.at(counts[li], record.experts[keep].reshape(-1), 1.0)
        ratio_sum[li] += float(np.sum(record.shared_norms[keep] / np.maximum(record.expert_norms[keep], 1e-12)))
        if record.labels is not None and record.assignment is not None:
            correct[li] += float(np.sum(record.groups[keep] == record.labels[keep]))
            labelled[li] += float(keep.sum())
    if not tokens.any():
        raise EmptyReductionError("no tokens left after applying the task filter")
    totals = counts.sum(axis=1, keepdims=True)
    loads = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    accuracy = None
    if labelled.any():
        accuracy = np.divide(correct, labelled, out=np.zeros_like(correct), where=labelled > 0)
    shared_ratio = np.divide(ratio_sum, tokens, out=np.zeros_like(ratio_sum), where=tokens > 0)
    return ExpertLoadStats(layers=layers, loads=loads, token_counts=tokens, experts_per_group=e,
                           shared_ratio=shared_ratio, routing_accuracy=accuracy)


# ----------------------------------------------------------------------
# Construction


def copy_ffn(ffn: ExpertFFN, rng: Optional[np.random.Generator] = None, perturb_scale: float = 0.0) -> ExpertFFN:
    """Copy an FFN; with a scale > 0 add Gaussian noise of σ = scale × per-matrix RMS"""
    def clone(t: Tensor) -> Tensor:
        data = resolve_weight(t).data.copy()
        if rng is not None and perturb_scale > 0.0:
            rms = float(np.sqrt(np.mean(data ** 2)))
            data = data + rng.normal(0.0, perturb_scale * rms, size=data.shape)
        return Tensor(data, requires_grad=True)

    return ExpertFFN(w1=clone(ffn.w1), b1=clone(ffn.b1), w2=clone(ffn.w2), b2=clone(ffn.b2))


def mean_ffn(a: ExpertFFN, b: ExpertFFN) -> ExpertFFN:
    """Elementwise mean of two FFNs"""
    if a.w1.shape != b.w1.shape or a.w2.shape != b.w2.shape:
        raise DimensionError("FFNs must share widths to be averaged", shapes=[a.w1.shape, b.w1.shape])

    def avg(x: Tensor, y: Tensor) -> Tensor:
        return Tensor((resolve_weight(x).data + resolve_weight(y).data) / 2, requires_grad=True)

    return ExpertFFN(w1=avg(a.w1, b.w1), b1=avg(a.b1, b.b1), w2=avg(a.w2, b.w2), b2=avg(a.b2, b.b2))


def _group_copies(ffn: ExpertFFN, count: int, rng: np.random.Generator, scale: float) -> List[ExpertFFN]:
    return [copy_ffn(ffn) if i == 0 else copy_ffn(ffn, rng, scale) for i in range(count)]


def _alpha(cfg: MoEConfig) -> Tensor:
    return Tensor(cfg.alpha_init, requires_grad=True)


def build_moe_from_ffn(und_ffn: ExpertFFN, gen_ffn: ExpertFFN, cfg: MoEConfig, rng: np.random.Generator) -> MoEParams:
    """
    Assemble an MoE layer from two stage-1 FFNs.

    Group 1 experts copy ``und_ffn`` and group 2 experts copy ``gen_ffn``;
    copies past the first in a group are perturbed. Shared experts start at
    the mean of the two FFNs. With ``cfg.task_router`` off the layer is the
    flat-pool baseline: one group holding all copies.
    """
    cfg.validate()
    if und_ffn.w1.shape != gen_ffn.w1.shape:
        raise DimensionError("stage-1 FFNs must share widths", shapes=[und_ffn.w1.shape, gen_ffn.w1.shape])
    d = und_ffn.d_model
    e = cfg.experts_per_group
    und_group = _group_copies(und_ffn, e, rng, cfg.perturb_scale)
    gen_group = _group_copies(gen_ffn, e, rng, cfg.perturb_scale)
    shared = [mean_ffn(und_ffn, gen_ffn) if i == 0 else copy_ffn(mean_ffn(und_ffn, gen_ffn), rng, cfg.perturb_scale)
              for i in range(cfg.shared_experts)]

    if cfg.task_router:
        router = TaskRouterParams.init(d, rng, cfg.router_init_std) if e else None
        groups = [und_group, gen_group] if e else []
        scores = [randn(rng, (e, d), cfg.router_init_std) for _ in groups]
    else:
        router = None
        groups = [und_group + gen_group] if e else []
        scores = [randn(rng, (2 * e, d), cfg.router_init_std)] if e else []
    return MoEParams(task_router=router, score_matrices=scores, group_experts=groups, shared_experts=shared,
                     alpha=_alpha(cfg), top_k=cfg.top_k, gate_full_softmax=cfg.gate_full_softmax,
                     force_group_by_label=cfg.force_group_by_label)


def init_moe(d_model: int, d_hidden: int, cfg: MoEConfig, rng: np.random.Generator, std: float = 0.02) -> MoEParams:
    """Fresh Gaussian init of every expert ("pure" experts)"""
    cfg.validate()
    e = cfg.experts_per_group
    shared = [ExpertFFN.init(d_model, d_hidden, rng, std) for _ in range(cfg.shared_experts)]
    if cfg.task_router:
        groups = [[ExpertFFN.init(d_model, d_hidden, rng, std) for _ in range(e)] for _ in range(NUM_TASK_GROUPS)] if e else []
        router = TaskRouterParams.init(d_model, rng, cfg.router_init_std) if e else None
        scores = [randn(rng, (e, d_model), cfg.router_init_std) for _ in groups]
    else:
        groups = [[ExpertFFN.init(d_model, d_hidden, rng, std) for _ in range(NUM_TASK_GROUPS * e)]] if e else []
        router = None
        scores = [randn(rng, (NUM_TASK_GROUPS * e, d_model), cfg.router_init_std)] if e else []
    return MoEParams(task_router=router, score_matrices=scores, group_experts=groups, shared_experts=shared,
                     alpha=_alpha(cfg), top_k=cfg.top_k, gate_full_softmax=cfg.gate_full_softmax,
                     force_group_by_label=cfg.force_group_by_label)
