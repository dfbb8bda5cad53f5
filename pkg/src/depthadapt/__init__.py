"""Two-stage subspace adaptation for depth-estimation networks.

Stage 1 attaches low-rank adapters to the conv, mlp, and attention weight
subspaces of a frozen model; stage 2 composes the stage-1 weights with a
memory-efficient projected negative-gradient correction under learnable
mixing scalars. Ships with the five-metric median-scaled depth evaluation
protocol, a procedural scene generator, and a CLI harness.
"""

from .adapters import AdapterSet, LoraAdapter, attach, effective_weight, merge, merge_all
from .autodiff import Tensor, backward, no_grad
from .metrics import DepthMetrics, EvalConfig, aggregate, compute_metrics, median_scale
from .model import ModelConfig, ToyDepthModel, build_model, forward_depth, training_loss
from .scenes import SceneConfig, SceneDataset, generate_scene, make_split
from .stage2 import (Stage2State, compose, full_param_direction, memory_footprint,
                     project_gradient, reconstruct, refresh_projector, stage2_step)
from .subspaces import (LayerDescriptor, SubspaceKind, SubspaceRegistry, classify_layers,
                        counts, select_subspaces)

__version__ = "0.1.0"

__all__ = [
    "AdapterSet", "LoraAdapter", "attach", "effective_weight", "merge", "merge_all",
    "Tensor", "backward", "no_grad",
    "DepthMetrics", "EvalConfig", "aggregate", "compute_metrics", "median_scale",
    "ModelConfig", "ToyDepthModel", "build_model", "forward_depth", "training_loss",
    "SceneConfig", "SceneDataset", "generate_scene", "make_split",
    "Stage2State", "compose", "full_param_direction", "memory_footprint",
    "project_gradient", "reconstruct", "refresh_projector", "stage2_step",
    "LayerDescriptor", "SubspaceKind", "SubspaceRegistry", "classify_layers",
    "counts", "select_subspaces",
    "__version__",
]
