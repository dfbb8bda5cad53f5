"""Full-parameter composition stage with projected-gradient memory.

After the low-rank adapters are merged, each layer trains two mixing
scalars and a rank-limited negative-gradient correction. Per layer and
step, with g the loss gradient of the base weight W:

    p  = P^T (-g)                       # project into the rank-rhat subspace
    M <- b1 M + (1 - b1) p              # momentum-smoothed accumulator
    V <- b2 V + (1 - b2) p*p            # second moment, also projected
    D  = lr * P (M_hat / (sqrt(V_hat) + eps))
    W_eff = alpha * W + beta * D

alpha and beta descend their own loss gradients (plain SGD); P refreshes
to the top singular vectors of the current gradient every refresh_period
steps. Optimizer state per layer is m*rhat + 2*rhat*n floats plus the two
scalars, against 2*m*n for dense Adam moments.

Projector, accumulator, and second moment are held in float64 for
orthogonality and bias-correction accuracy; compositions are cast to the
model dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import GradientMap, Tensor
from .errors import ConfigError, ScheduleError, ShapeError, StateError
from .subspaces import LayerDescriptor, SubspaceRegistry

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Stage2State:
    """Per-layer stage-2 state: mixing scalars, projector, projected moments."""

    layer_id: str
    alpha: Tensor  # scalar, learnable, initialized to 1
    beta: Tensor   # scalar, learnable, initialized to 0
    projector: np.ndarray      # (m, rhat), orthonormal columns, float64
    accumulator: np.ndarray    # (rhat, n) first moment, float64
    second_moment: np.ndarray  # (rhat, n), float64
    refresh_period: int
    step_counter: int = 0
    direction: np.ndarray = field(default=None, repr=False)  # (m, n), model dtype


def full_param_direction(layer: LayerDescriptor, grads: GradientMap) -> Tensor:
    """Negative loss gradient of the layer's base weight."""
    grad = grads.get(layer.weight)
    if grad is None:
        raise StateError(f"layer {layer.layer_id}: no gradient entry for the base weight")
    return Tensor(-grad.data)


def compose(w_stage1: Tensor, direction: Tensor, alpha, beta) -> Tensor:
    """alpha * w_stage1 + beta * direction, elementwise."""
    if w_stage1.shape != direction.shape:
        raise ShapeError(f"compose: weight shape {w_stage1.shape} differs "
                         f"from direction shape {direction.shape}")
    return ad.add(ad.mul(w_stage1, alpha), ad.mul(direction, beta))


def project_gradient(grad: Tensor, projector: Tensor) -> Tensor:
    """P^T grad: the gradient expressed in projector coordinates."""
    return ad.matmul(ad.transpose(projector), grad)


def reconstruct(projector: Tensor, projected: Tensor) -> Tensor:
    """P projected: back to full weight coordinates."""
    return ad.matmul(projector, projected)


def refresh_projector(grad: Tensor, rhat: int, previous: Optional[Tensor] = None) -> Tensor:
    """Top-rhat left singular vectors of the gradient, orthonormal columns.

    Sign convention: the largest-magnitude entry of each column is positive,
    so refreshes are deterministic. An all-zero gradient keeps the previous
    projector, or identity columns on the first call.
    """
    if grad.data.ndim != 2:
        raise ShapeError(f"refresh_projector expects a 2-D gradient, got shape {grad.shape}")
    m, n = grad.shape
    if rhat < 1 or rhat > min(m, n):
        raise ConfigError(f"projector rank must be in [1, min(m={m}, n={n})], got {rhat}")
    if not np.any(grad.data):
        if previous is not None:
            return previous
        return Tensor(np.eye(m, rhat, dtype=grad.dtype))
    u, _, _ = np.linalg.svd(grad.data.astype(np.float64), full_matrices=False)
    p = u[:, :rhat]
    signs = np.sign(p[np.abs(p).argmax(axis=0), np.arange(rhat)])
    signs[signs == 0] = 1.0
    return Tensor((p * signs).astype(grad.dtype))


def init_states(model, registry: SubspaceRegistry, rhat: int, refresh_period: int) -> dict[str, Stage2State]:
    """Fresh stage-2 states (alpha 1, beta 0), installed on the model.

    Requires the stage-1 adapters to be merged first so the base weights
    hold the stage-1 solution.
    """
    if model.adapter_set is not None:
        raise ScheduleError("stage 2 requires stage-1 adapters to be merged first")
    if refresh_period < 1:
        raise ConfigError(f"refresh period must be >= 1, got {refresh_period}")
    states: dict[str, Stage2State] = {}
    for desc in registry.all_layers():
        if rhat < 1 or rhat > min(desc.m, desc.n):
            raise ConfigError(f"layer {desc.layer_id}: stage-2 rank must be in "
                              f"[1, min(m={desc.m}, n={desc.n})], got {rhat}")
        dtype = desc.weight.dtype
        states[desc.layer_id] = Stage2State(
            layer_id=desc.layer_id,
            alpha=Tensor(np.asarray(1.0, dtype=dtype), requires_grad=True, name=f"stage2/{desc.layer_id}/alpha"),
            beta=Tensor(np.asarray(0.0, dtype=dtype), requires_grad=True, name=f"stage2/{desc.layer_id}/beta"),
            projector=np.eye(desc.m, rhat, dtype=np.float64),
            accumulator=np.zeros((rhat, desc.n), dtype=np.float64),
            second_moment=np.zeros((rhat, desc.n), dtype=np.float64),
            refresh_period=refresh_period,
            direction=np.zeros((desc.m, desc.n), dtype=dtype),
        )
    model.install_stage2(states)
    return states


def composed_direction(state: Stage2State, lr: float) -> np.ndarray:
    """Bias-corrected, Adam-normalized correction in weight coordinates, scaled by lr."""
    t = state.step_counter
    if t == 0:
        return np.zeros_like(state.direction)
    m_hat = state.accumulator / (1.0 - ADAM_BETA1 ** t)
    v_hat = state.second_moment / (1.0 - ADAM_BETA2 ** t)
    step = m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return (lr * (state.projector @ step)).astype(state.direction.dtype)


def stage2_step(model, batch, states: dict[str, Stage2State], lr: float,
                alpha_beta_lr: float) -> float:
    """One full stage-2 update over a batch; returns the batch loss.

    Order per layer: take the loss gradients from the current composed
    forward, fold the projected negative gradient into the moments, rebuild
    the composition direction for the next forward, and step alpha and beta
    along their own gradients. The projector refreshes from the current
    gradient every refresh_period steps.
    """
    if model.stage2_states is not states:
        raise ScheduleError("stage2_step: states are not installed on this model")
    rgb, gt = batch
    loss = model.batch_loss(rgb, gt)
    grads = ad.backward(loss)
    for desc in model.adaptable_layers():
        state = states[desc.layer_id]
        grad_entry = grads.get(desc.weight)
        g = grad_entry.data.astype(np.float64) if grad_entry is not None \
            else np.zeros((desc.m, desc.n), dtype=np.float64)
        if state.step_counter % state.refresh_period == 0 and np.any(g):
            state.projector = refresh_projector(Tensor(g), state.projector.shape[1]).data
        projected = state.projector.T @ (-g)
        state.accumulator = ADAM_BETA1 * state.accumulator + (1.0 - ADAM_BETA1) * projected
        state.second_moment = ADAM_BETA2 * state.second_moment + (1.0 - ADAM_BETA2) * projected ** 2
        state.step_counter += 1
        state.direction = composed_direction(state, lr)
        for scalar in (state.alpha, state.beta):
            g_scalar = grads.get(scalar)
            if g_scalar is not None:
                scalar.update_(-alpha_beta_lr * g_scalar.data)
    return loss.item()


@dataclass(frozen=True)
class MemoryFootprint:
    mode: str
    floats_per_layer: dict
    total_floats: int

    def as_dict(self) -> dict:
        return {"mode": self.mode, "floats_per_layer": dict(self.floats_per_layer),
                "total_floats": self.total_floats}


def memory_footprint(registry: SubspaceRegistry, mode: str, rhat: int) -> MemoryFootprint:
    """Optimizer-state accounting in floats.

    full-adam keeps two dense moment tensors (2*m*n per layer); projected
    keeps the projector (m*rhat), two projected moments (2*rhat*n), and the
    two mixing scalars.
    """
    if rhat < 1:
        raise ConfigError(f"projection rank must be >= 1, got {rhat}")
    if mode not in ("full-adam", "projected"):
        raise ConfigError(f"unknown memory mode {mode!r} (use 'full-adam' or 'projected')")
    per_layer = {}
    for desc in registry.all_layers():
        if mode == "full-adam":
            per_layer[desc.layer_id] = 2 * desc.m * desc.n
        else:
            per_layer[desc.layer_id] = desc.m * rhat + 2 * rhat * desc.n + 2
    return MemoryFootprint(mode, per_layer, sum(per_layer.values()))
