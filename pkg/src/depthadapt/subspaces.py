"""Partition of a model's adaptable weight matrices into subspaces.

Every adaptable weight belongs to exactly one of three families: conv,
mlp, or attention. Convolution kernels are viewed as 2-D matrices of
shape O x (C*kh*kw); bias vectors and normalization parameters are not
adaptable and never enter the registry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from .autodiff import Tensor
from .errors import ClassificationError, ConfigError


class SubspaceKind(str, Enum):
    CONV = "conv"
    MLP = "mlp"
    ATTENTION = "attention"


ALL_KINDS = (SubspaceKind.CONV, SubspaceKind.MLP, SubspaceKind.ATTENTION)


def parse_kinds(spec: Iterable[str] | str) -> frozenset[SubspaceKind]:
    """Parse kind names (e.g. "mlp,conv") into a set, rejecting unknowns."""
    if isinstance(spec, str):
        spec = [part for part in spec.split(",") if part.strip()]
    kinds = set()
    for name in spec:
        try:
            kinds.add(SubspaceKind(str(name).strip().lower()))
        except ValueError:
            valid = ", ".join(k.value for k in ALL_KINDS)
            raise ConfigError(f"unknown subspace kind {name!r} (valid: {valid})") from None
    return frozenset(kinds)


@dataclass(frozen=True)
class LayerDescriptor:
    """One adaptable weight: identity, family, and its 2-D adaptation view."""

    layer_id: str
    kind: SubspaceKind
    m: int
    n: int
    weight: Tensor  # live handle to the (m, n) parameter

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ConfigError(f"layer {self.layer_id}: extents must be positive, got ({self.m}, {self.n})")
        if self.weight.shape != (self.m, self.n):
            raise ConfigError(f"layer {self.layer_id}: weight shape {self.weight.shape} "
                              f"does not match declared view ({self.m}, {self.n})")


@dataclass(frozen=True)
class SubspaceRegistry:
    conv_layers: tuple[LayerDescriptor, ...]
    mlp_layers: tuple[LayerDescriptor, ...]
    attention_layers: tuple[LayerDescriptor, ...]

    def counts(self) -> tuple[int, int, int]:
        """Sequence lengths in (conv, mlp, attention) order."""
        return (len(self.conv_layers), len(self.mlp_layers), len(self.attention_layers))

    def all_layers(self) -> tuple[LayerDescriptor, ...]:
        """Layers in registry order: conv, then mlp, then attention."""
        return self.conv_layers + self.mlp_layers + self.attention_layers

    def layer(self, layer_id: str) -> LayerDescriptor:
        for desc in self.all_layers():
            if desc.layer_id == layer_id:
                return desc
        raise ClassificationError(f"no layer {layer_id!r} in registry")


def build_registry(descriptors: Iterable[LayerDescriptor]) -> SubspaceRegistry:
    """Bucket descriptors by kind, preserving order; duplicates are an error."""
    buckets = {kind: [] for kind in ALL_KINDS}
    seen: set[str] = set()
    for desc in descriptors:
        if not isinstance(desc.kind, SubspaceKind):
            raise ClassificationError(f"layer {desc.layer_id!r} has unknown kind {desc.kind!r}")
        if desc.layer_id in seen:
            raise ClassificationError(f"layer {desc.layer_id!r} appears twice")
        seen.add(desc.layer_id)
        buckets[desc.kind].append(desc)
    return SubspaceRegistry(
        conv_layers=tuple(buckets[SubspaceKind.CONV]),
        mlp_layers=tuple(buckets[SubspaceKind.MLP]),
        attention_layers=tuple(buckets[SubspaceKind.ATTENTION]),
    )


def classify_layers(model) -> SubspaceRegistry:
    """Classify every adaptable weight of a model into exactly one subspace.

    The model exposes ``adaptable_layers()`` returning descriptors in
    forward-pass order; two calls on the same model yield identical
    registries.
    """
    return build_registry(model.adaptable_layers())


def counts(registry: SubspaceRegistry) -> tuple[int, int, int]:
    return registry.counts()


def select_subspaces(registry: SubspaceRegistry, enabled: Iterable[SubspaceKind] | str) -> SubspaceRegistry:
    """Restrict the registry to the enabled kinds (ablation rows)."""
    if isinstance(enabled, str):
        kinds = parse_kinds(enabled)
    else:
        kinds = frozenset(k if isinstance(k, SubspaceKind) else SubspaceKind(str(k).lower())
                          if str(k).lower() in SubspaceKind._value2member_map_
                          else _reject_kind(k)
                          for k in enabled)
    if not kinds:
        raise ConfigError("select_subspaces: the enabled set must not be empty")
    return SubspaceRegistry(
        conv_layers=registry.conv_layers if SubspaceKind.CONV in kinds else (),
        mlp_layers=registry.mlp_layers if SubspaceKind.MLP in kinds else (),
        attention_layers=registry.attention_layers if SubspaceKind.ATTENTION in kinds else (),
    )


def registry_json(registry: SubspaceRegistry) -> str:
    """Registry dump as a JSON document for CLI inspection."""
    rows = [{"layer_id": d.layer_id, "kind": d.kind.value, "m": d.m, "n": d.n}
            for d in registry.all_layers()]
    return json.dumps(rows, indent=2)
