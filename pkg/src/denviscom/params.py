"""Flat named views over nested weight dataclasses.

Checkpoints, optimizers and parameter counting all want a stable
``name -> Tensor`` mapping; the weight containers themselves stay nested
dataclasses.  Names join dataclass field names (and list indices) with dots,
in declaration order, so the mapping is deterministic.
"""

from __future__ import annotations

import dataclasses

from .tensor import Tensor


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Collect every Tensor reachable through dataclass fields / lists / tuples / dicts."""
    out: dict[str, Tensor] = {}

    def walk(node, name):
        if node is None:
            return
        if isinstance(node, Tensor):
            out[name] = node
        elif dataclasses.is_dataclass(node):
            for field in dataclasses.fields(node):
                walk(getattr(node, field.name), f"{name}.{field.name}" if name else field.name)
        elif isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                walk(item, f"{name}.{i}" if name else str(i))
        elif isinstance(node, dict):
            for key, item in node.items():
                walk(item, f"{name}.{key}" if name else str(key))

    walk(obj, prefix)
    return out


def trainable_parameters(obj) -> dict[str, Tensor]:
    return {k: v for k, v in named_parameters(obj).items() if v.requires_grad}


def count_parameters(obj) -> int:
    return sum(t.size for t in named_parameters(obj).values())
