#!/usr/bin/env python3
"""
Low-Rank Adaptation

A LoraAdapter stands in for a weight matrix: the frozen base plus a
trainable delta scale·B·A. Models reach their weights through
``resolve_weight`` so an adapter can replace any matrix slot in place.
"""

import fnmatch
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np

from task_aware_moe import functional as F
from task_aware_moe.errors import ConfigError, ContractError
from task_aware_moe.params import ParameterTree, static_field
from task_aware_moe.tensor import Tensor

logger = logging.getLogger("task_aware_moe.lora")

DEFAULT_RANK = 8
DEFAULT_LORA_ALPHA = 16.0
DEFAULT_TARGETS = (
    "blocks.*.attn.wq",
    "blocks.*.attn.wk",
    "blocks.*.attn.wv",
    "blocks.*.attn.wo",
    "blocks.*.moe.group_experts.*.*.w1",
    "blocks.*.moe.group_experts.*.*.w2",
)
ADAPTER_PREFIX = "lora."


@dataclass
class LoraAdapter(ParameterTree):
    """effective weight = base + scale · B·A, with base: [m×n], A: [r×n], B: [m×r]"""
    base: Tensor
    lora_a: Tensor
    lora_b: Tensor
    rank: int = static_field(DEFAULT_RANK)
    scale: float = static_field(DEFAULT_LORA_ALPHA / DEFAULT_RANK)

    @classmethod
    def wrap(cls, base: Tensor, rank: int, lora_alpha: float, rng: np.random.Generator,
             std: float = 0.02) -> "LoraAdapter":
        if rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {rank}", keys=["lora.rank"])
        m, n = base.shape
        frozen = Tensor(base.data, requires_grad=False, name=base.name)
        return cls(base=frozen,
                   lora_a=Tensor(rng.normal(0.0, std, size=(rank, n)), requires_grad=True),
                   lora_b=Tensor(np.zeros((m, rank)), requires_grad=True),
                   rank=rank,
                   scale=lora_alpha / rank)

    @property
    def shape(self):
        return self.base.shape

    def effective_weight(self) -> Tensor:
        """base + scale·B·A on the tape"""
        delta = F.matmul(self.lora_b, self.lora_a)
        return F.add(self.base, F.mul(delta, self.scale))


Weight = Union[Tensor, LoraAdapter]


def resolve_weight(weight: Weight) -> Tensor:
    if isinstance(weight, LoraAdapter):
        return weight.effective_weight()
    return weight


def merge_lora(adapter: LoraAdapter) -> Tensor:
    """Dense base + scale·B·A as a fresh leaf tensor"""
    delta = adapter.lora_b.data @ adapter.lora_a.data
    return Tensor(adapter.base.data + adapter.scale * delta, requires_grad=False, name=adapter.base.name)


def resolve_targets(model: ParameterTree, targets: Iterable[str], strict: bool = True) -> List[str]:
    """
    Expand glob patterns against the model's matrix slots.

    Raises:
        ConfigError: if ``strict`` and a pattern matches no 2-D weight
    """
    names = [name for name, p in model.named_parameters() if p.ndim == 2]
    slots: List[str] = []
    unknown = []
    for pattern in targets:
        hits = [n for n in names if fnmatch.fnmatchcase(n, pattern)]
        if not hits:
            unknown.append(pattern)
        slots.extend(h for h in hits if h not in slots)
    if unknown:
        if strict:
            raise ConfigError("unknown LoRA target", keys=unknown)
        logger.debug(f"LoRA patterns without a match: {', '.join(unknown)}")
    return slots


def attach_lora(model: ParameterTree, targets: Sequence[str] = DEFAULT_TARGETS, rank: int = DEFAULT_RANK,
                lora_alpha: float = DEFAULT_LORA_ALPHA, rng: np.random.Generator = None,
                strict: bool = True) -> List[str]:
    """
    Replace each targeted matrix with a LoraAdapter, in place.

    Args:
        model: parameter tree to adapt
        targets: glob patterns over dotted parameter names
        rank: adapter rank r
        lora_alpha: scale numerator; scale = lora_alpha / r
        rng: source for A's Gaussian init
        strict: fail on a pattern that matches nothing

    Returns:
        The dotted names that were adapted
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {rank}", keys=["lora.rank"])
    slots = resolve_targets(model, targets, strict)
    for slot in slots:
        base = model.get_slot(slot)
        model.set_slot(slot, LoraAdapter.wrap(base, rank, lora_alpha, rng))
    logger.info(f"Attached LoRA (r={rank}, alpha={lora_alpha}) to {len(slots)} matrices")
    return slots


def adapters(model: ParameterTree) -> Dict[str, LoraAdapter]:
    """Every adapter in the tree keyed by its slot name"""
    found: Dict[str, LoraAdapter] = {}
    for name, _ in model.named_parameters():
        if name.endswith(".lora_a"):
            slot = name[: -len(".lora_a")]
            found[slot] = model.get_slot(slot)
    return found


def merge_all(model: ParameterTree) -> int:
    """Swap every adapter for its merged dense weight; returns how many were merged"""
    merged = adapters(model)
    for slot, adapter in merged.items():
        model.set_slot(slot, merge_lora(adapter))
    if merged:
        logger.info(f"Merged {len(merged)} LoRA adapters into dense weights")
    return len(merged)


def adapter_state(model: ParameterTree) -> Dict[str, np.ndarray]:
    """Adapter-only tensors, keys prefixed with ``lora.``"""
    state = {}
    for slot, adapter in adapters(model).items():
        state[f"{ADAPTER_PREFIX}{slot}.lora_a"] = adapter.lora_a.data.copy()
        state[f"{ADAPTER_PREFIX}{slot}.lora_b"] = adapter.lora_b.data.copy()
    return state


def load_adapter_state(model: ParameterTree, state: Dict[str, np.ndarray]) -> None:
    found = adapters(model)
    for key, value in state.items():
        if not key.startswith(ADAPTER_PREFIX):
            raise ContractError(f"adapter checkpoint key {key!r} lacks the {ADAPTER_PREFIX!r} prefix")
        slot, _, part = key[len(ADAPTER_PREFIX):].rpartition(".")
        if slot not in found:
            raise ContractError(f"no adapter attached at {slot!r}")
        getattr(found[slot], part).data = np.array(value, dtype=np.float64)
