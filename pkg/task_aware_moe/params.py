#!/usr/bin/env python3
"""
Parameter Containers

Model pieces are dataclasses deriving from ``ParameterTree``. Walking their
fields yields dotted parameter names such as ``blocks.0.attn.wq`` that the
optimizer, freezing rules, LoRA attachment and checkpoints all share.
"""

import dataclasses
import logging
from typing import Any, Callable, Dict, Iterator, List, Tuple

import numpy as np

from task_aware_moe.errors import CheckpointError, ConfigError, DimensionError
from task_aware_moe.tensor import Tensor

logger = logging.getLogger("task_aware_moe.params")


class ParameterTree:
    """Mixin for dataclasses whose fields hold Tensors, subtrees or lists of them"""

    def _children(self) -> Iterator[Tuple[str, Any]]:
        for f in dataclasses.fields(self):
            if f.metadata.get("static"):
                continue
            yield f.name, getattr(self, f.name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters() if p.requires_grad}

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for _, p in self.named_parameters() if p.requires_grad or not trainable_only)

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        """Mark parameters whose name satisfies ``predicate`` as trainable, freeze the rest"""
        for name, p in self.named_parameters():
            p.requires_grad = bool(predicate(name))
            p.grad = None

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    # ------------------------------------------------------------------
    # Slot access by dotted path (used to swap a weight for an adapter)

    def get_slot(self, path: str) -> Any:
        node: Any = self
        for part in path.split("."):
            node = node[int(part)] if isinstance(node, list) else getattr(node, part)
        return node

    def set_slot(self, path: str, value: Any) -> None:
        parent_path, _, leaf = path.rpartition(".")
        parent = self.get_slot(parent_path) if parent_path else self
        if isinstance(parent, list):
            parent[int(leaf)] = value
        else:
            setattr(parent, leaf, value)

    # ------------------------------------------------------------------
    # State dict

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if strict and (missing or unexpected):
            raise CheckpointError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name not in own:
                continue
            target = own[name]
            if target.shape != tuple(value.shape):
                raise DimensionError(f"state dict entry {name} has the wrong shape",
                                     shapes=[target.shape, tuple(value.shape)])
            target.data = np.array(value, dtype=np.float64)


def _walk(value: Any, path: str) -> Iterator[Tuple[str, Tensor]]:
    if value is None:
        return
    if isinstance(value, Tensor):
        yield path, value
    elif isinstance(value, ParameterTree):
        yield from value.named_parameters(prefix=f"{path}.")
    elif isinstance(value, list):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


def static_field(default: Any = None, **kwargs: Any) -> Any:
    """A dataclass field that is configuration, not a parameter"""
    if "default_factory" not in kwargs:
        kwargs["default"] = default
    return dataclasses.field(metadata={"static": True}, **kwargs)


def copy_tree(tree: ParameterTree) -> ParameterTree:
    """Deep copy with fresh leaf tensors (no shared data, no grads)"""
    return _copy(tree)


def _copy(value: Any) -> Any:
    if isinstance(value, Tensor):
        return Tensor(value.data, requires_grad=value.requires_grad, name=value.name)
    if isinstance(value, ParameterTree):
        changes = {}
        for f in dataclasses.fields(value):
            current = getattr(value, f.name)
            changes[f.name] = current if f.metadata.get("static") else _copy(current)
        return dataclasses.replace(value, **changes)
    if isinstance(value, list):
        return [_copy(v) for v in value]
    if value is None or isinstance(value, (int, float, str, bool)):
        return value
    raise ConfigError(f"cannot copy parameter container field of type {type(value).__name__}")
