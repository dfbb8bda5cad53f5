"""Low-rank adapter pairs attached to frozen weight matrices.

The adapted forward weight of a layer is W + B A with B of shape (m, r)
and A of shape (r, n), r <= min(m, n). B starts at zero and A from a
seeded normal draw (sigma 0.02), so attaching is exactly behavior
preserving until training moves the factors. No rank-dependent scaling is
applied; the composition is the literal sum W + B A.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, RankError, StateError
from .subspaces import LayerDescriptor, SubspaceRegistry

ADAPTER_INIT_SIGMA = 0.02


@dataclass
class LoraAdapter:
    layer_id: str
    rank: int
    B: Tensor  # (m, r), zero initialized
    A: Tensor  # (r, n), N(0, ADAPTER_INIT_SIGMA^2)


class AdapterSet:
    """Adapters keyed by layer id, plus the registry selection they cover."""

    def __init__(self, selection: SubspaceRegistry, rank: int, init_seed: int):
        self.selection = selection
        self.rank = rank
        self.init_seed = init_seed
        self.adapters: dict[str, LoraAdapter] = {}

    def __len__(self) -> int:
        return len(self.adapters)

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self.adapters

    def get(self, layer_id: str) -> Optional[LoraAdapter]:
        return self.adapters.get(layer_id)

    def parameters(self) -> list[Tensor]:
        """Trainable factors in registry order: B then A per layer."""
        params: list[Tensor] = []
        for adapter in self.adapters.values():
            params.extend((adapter.B, adapter.A))
        return params


def build_adapter_set(selection: SubspaceRegistry, rank: int = 4, init_seed: int = 0) -> AdapterSet:
    """Create zero-impact adapters for every layer of the selection."""
    if rank < 1:
        raise ConfigError(f"adapter rank must be >= 1, got {rank}")
    for desc in selection.all_layers():
        if rank > min(desc.m, desc.n):
            raise RankError(f"layer {desc.layer_id}: rank {rank} exceeds "
                            f"min(m={desc.m}, n={desc.n})")
    rng = np.random.Generator(np.random.PCG64(init_seed))
    adapter_set = AdapterSet(selection, rank, init_seed)
    for desc in selection.all_layers():
        dtype = desc.weight.dtype
        b = ad.zeros((desc.m, rank), dtype=dtype, requires_grad=True, name=f"adapter/{desc.layer_id}/B")
        a = Tensor(rng.normal(0.0, ADAPTER_INIT_SIGMA, size=(rank, desc.n)).astype(dtype),
                   requires_grad=True, name=f"adapter/{desc.layer_id}/A")
        adapter_set.adapters[desc.layer_id] = LoraAdapter(desc.layer_id, rank, b, a)
    return adapter_set


def attach(model, selection: SubspaceRegistry, rank: int = 4, init_seed: int = 0) -> AdapterSet:
    """Create adapters for the selection and install them on the model."""
    adapter_set = build_adapter_set(selection, rank, init_seed)
    model.install_adapters(adapter_set)
    return adapter_set


def effective_weight(layer: LayerDescriptor, adapter: LoraAdapter) -> Tensor:
    """Graph node for W + B A (gradients flow to B and A, never to W in stage 1)."""
    if adapter.B.shape != (layer.m, adapter.rank) or adapter.A.shape != (adapter.rank, layer.n):
        raise ConfigError(f"layer {layer.layer_id}: adapter shapes {adapter.B.shape}/{adapter.A.shape} "
                          f"do not fit weight view ({layer.m}, {layer.n})")
    return ad.add(layer.weight, ad.matmul(adapter.B, adapter.A))


def merge(model, layer_id: str) -> None:
    """Fold B A into the base weight in place and drop the adapter.

    Uses the same product and add kernels as the adapted forward path, so
    the merged weight is bit-identical to the in-graph effective weight.
    """
    adapter_set = model.adapter_set
    if adapter_set is None or layer_id not in adapter_set:
        raise StateError(f"layer {layer_id}: no adapter attached (already merged?)")
    adapter = adapter_set.adapters.pop(layer_id)
    weight = model.weights[layer_id]
    delta = ad.ordered_matmul_data(adapter.B.data, adapter.A.data)
    weight.assign_(weight.data + delta)
    if not adapter_set.adapters:
        model.clear_adapters()


def merge_all(model) -> None:
    """Merge every attached adapter (stage-1 to stage-2 transition)."""
    if model.adapter_set is None:
        raise StateError("no adapters attached to merge")
    for layer_id in list(model.adapter_set.adapters):
        merge(model, layer_id)


@dataclass(frozen=True)
class ParamCountReport:
    adapter_params: int
    base_params: int
    stage2_params: int
    total: int
    formatted_millions: str

    def as_dict(self) -> dict:
        return {
            "adapter_params": self.adapter_params,
            "base_params": self.base_params,
            "stage2_params": self.stage2_params,
            "total": self.total,
            "formatted_millions": self.formatted_millions,
        }


def format_millions(total: int) -> str:
    """total/1e6 rounded half-even to one decimal, e.g. 99_100_000 -> "99.1"."""
    return str((Decimal(total) / Decimal(1_000_000)).quantize(Decimal("0.1"), ROUND_HALF_EVEN))


def trainable_param_count(adapter_set: Optional[AdapterSet], registry: SubspaceRegistry,
                          stage: int = 1, stage2_rank: Optional[int] = None) -> ParamCountReport:
    """Parameter accounting behind the Total(M) reporting column.

    adapter_params sums m*r + r*n over attached adapters; base_params sums
    m*n over the registry. Stage 2 additionally counts the per-layer mixing
    scalars plus projector (m*rhat) and accumulator (rhat*n) entries.
    """
    adapter_params = 0
    if adapter_set is not None:
        for adapter in adapter_set.adapters.values():
            m, r = adapter.B.shape
            n = adapter.A.shape[1]
            adapter_params += m * r + r * n
    base_params = sum(d.m * d.n for d in registry.all_layers())
    stage2_params = 0
    if stage == 2:
        if stage2_rank is None or stage2_rank < 1:
            raise ConfigError("stage-2 parameter accounting needs a positive stage2_rank")
        for d in registry.all_layers():
            stage2_params += 2 + d.m * stage2_rank + stage2_rank * d.n
    total = adapter_params + base_params + stage2_params
    return ParamCountReport(adapter_params, base_params, stage2_params, total,
                            format_millions(total))
