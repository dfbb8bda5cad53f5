"""Toy depth-estimation network exercising all three weight subspaces.

Architecture: a two-layer strided conv stem, one attention block over the
flattened feature map (fused QKV projection plus output projection, with
a residual add), and a per-token MLP head that also sees an average-pooled
RGB skip. Head outputs are upsampled back to input resolution and mapped
through a sigmoid disparity parameterization

    depth = 1 / (a * sigmoid(x) + b),  a = 1/min_depth - 1/max_depth,
                                       b = 1/max_depth

so every emitted depth lies strictly inside [min_depth, max_depth].

The network is bias-free: its parameters are exactly the six weight
matrices of the subspace registry (two conv, two attention projections,
two mlp layers). Convolution kernels are stored in their 2-D adaptation
view O x (C*kh*kw) and reshaped in-graph.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import adapters as adapters_mod
from . import autodiff as ad
from . import stage2 as stage2_mod
from .autodiff import Tensor
from .errors import ConfigError, DomainError, ShapeError, StateError
from .subspaces import LayerDescriptor, SubspaceKind

STRIDE_FACTOR = 4  # two stride-2 convolutions


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple = (64, 64)
    base_channels: int = 16
    attention_heads: int = 2
    mlp_hidden: int = 64
    min_depth: float = 0.1
    max_depth: float = 15.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        h, w = self.input_size
        if h % STRIDE_FACTOR or w % STRIDE_FACTOR or h < STRIDE_FACTOR or w < STRIDE_FACTOR:
            raise ConfigError(f"model.input_size: extents must be positive multiples of "
                              f"{STRIDE_FACTOR}, got {self.input_size}")
        if self.base_channels < 8 or self.base_channels % 2:
            raise ConfigError(f"model.base_channels must be an even number >= 8, "
                              f"got {self.base_channels}")
        attn_width = 4 * self.base_channels
        if self.attention_heads < 1 or attn_width % self.attention_heads:
            raise ConfigError(f"model.attention_heads must divide the attention width "
                              f"{attn_width}, got {self.attention_heads}")
        if self.mlp_hidden < 4:
            raise ConfigError(f"model.mlp_hidden must be >= 4, got {self.mlp_hidden}")
        if self.min_depth <= 0 or self.min_depth >= self.max_depth:
            raise ConfigError(f"model depth range invalid: "
                              f"[{self.min_depth}, {self.max_depth}]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be 'float32' or 'float64', got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


class ToyDepthModel:
    """Weights, layer descriptors, and the forward pass."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        c = cfg.base_channels
        self.stem1_channels = 2 * c
        self.attn_width = 4 * c
        self.head_channels = max(4, c // 2)
        self.head_dim = self.attn_width // cfg.attention_heads
        dtype = cfg.np_dtype
        rng = np.random.Generator(np.random.PCG64(cfg.seed))

        def init(name, m, n, gain):
            scale = np.sqrt(gain / m)
            data = rng.normal(0.0, scale, size=(m, n)).astype(dtype)
            return Tensor(data, requires_grad=False, name=f"model/{name}")

        # conv kernels live in their 2-D view (O, C*kh*kw); fan-in is the column count
        def init_conv(name, out_ch, in_ch, ksize):
            k = in_ch * ksize * ksize
            data = rng.normal(0.0, np.sqrt(2.0 / k), size=(out_ch, k)).astype(dtype)
            return Tensor(data, requires_grad=False, name=f"model/{name}")

        # 4x4 s2 p1 then 2x2 s2 p0: both output extents divide exactly
        self.weights: dict[str, Tensor] = {
            "conv1": init_conv("conv1", self.stem1_channels, 3, 4),
            "conv2": init_conv("conv2", self.attn_width, self.stem1_channels, 2),
            "attn_qkv": init("attn_qkv", self.attn_width, 3 * self.attn_width, 1.0),
            "attn_out": init("attn_out", self.attn_width, self.attn_width, 1.0),
            "mlp1": init("mlp1", self.attn_width + 3, cfg.mlp_hidden, 2.0),
            "mlp2": init("mlp2", cfg.mlp_hidden, self.head_channels, 1.0),
        }
        self.conv_shapes = {
            "conv1": (self.stem1_channels, 3, 4, 4),
            "conv2": (self.attn_width, self.stem1_channels, 2, 2),
        }
        kinds = {
            "conv1": SubspaceKind.CONV, "conv2": SubspaceKind.CONV,
            "attn_qkv": SubspaceKind.ATTENTION, "attn_out": SubspaceKind.ATTENTION,
            "mlp1": SubspaceKind.MLP, "mlp2": SubspaceKind.MLP,
        }
        self._descriptors = tuple(
            LayerDescriptor(name, kinds[name], w.shape[0], w.shape[1], w)
            for name, w in self.weights.items()
        )
        self._descriptor_map = {d.layer_id: d for d in self._descriptors}
        self.adapter_set = None
        self.stage2_states = None

    # -- registry / adaptation wiring ---------------------------------------

    def adaptable_layers(self) -> tuple[LayerDescriptor, ...]:
        """Descriptors in forward-pass order."""
        return self._descriptors

    def install_adapters(self, adapter_set) -> None:
        if self.adapter_set is not None:
            raise StateError("adapters are already attached to this model")
        if self.stage2_states is not None:
            raise StateError("cannot attach adapters while stage-2 states are installed")
        for layer_id in adapter_set.adapters:
            if layer_id not in self.weights:
                raise StateError(f"adapter targets unknown layer {layer_id!r}")
        self.adapter_set = adapter_set

    def clear_adapters(self) -> None:
        self.adapter_set = None

    def install_stage2(self, states) -> None:
        if self.adapter_set is not None:
            raise StateError("merge adapters before installing stage-2 states")
        self.stage2_states = states

    def set_base_requires_grad(self, flag: bool) -> None:
        for w in self.weights.values():
            w.requires_grad = flag

    def base_weight_hash(self) -> str:
        digest = hashlib.sha256()
        for name, w in self.weights.items():
            digest.update(name.encode())
            digest.update(w.data.tobytes())
        return digest.hexdigest()

    def _effective_weight(self, layer_id: str) -> Tensor:
        if self.stage2_states is not None and layer_id in self.stage2_states:
            state = self.stage2_states[layer_id]
            return stage2_mod.compose(self.weights[layer_id], Tensor(state.direction),
                                      state.alpha, state.beta)
        if self.adapter_set is not None and layer_id in self.adapter_set:
            return adapters_mod.effective_weight(self._descriptor_map[layer_id],
                                                 self.adapter_set.adapters[layer_id])
        return self.weights[layer_id]

    # -- forward -------------------------------------------------------------

    def forward(self, rgb: np.ndarray) -> list[Tensor]:
        """Per-frame depth maps as graph tensors of shape (H, W)."""
        rgb = np.asarray(rgb)
        h, w = self.cfg.input_size
        if rgb.ndim != 4 or rgb.shape[1] != 3 or rgb.shape[2:] != (h, w):
            raise ShapeError(f"forward expects input of shape (B, 3, {h}, {w}), got {rgb.shape}")
        if not np.isfinite(rgb).all():
            raise DomainError("forward: input contains non-finite values")
        dtype = self.cfg.np_dtype
        rgb = rgb.astype(dtype, copy=False)
        batch = rgb.shape[0]
        hp, wp = h // STRIDE_FACTOR, w // STRIDE_FACTOR
        tokens_n = hp * wp
        pooled = rgb.reshape(batch, 3, hp, STRIDE_FACTOR, wp, STRIDE_FACTOR).mean(axis=(3, 5))

        k1 = ad.reshape(self._effective_weight("conv1"), self.conv_shapes["conv1"])
        k2 = ad.reshape(self._effective_weight("conv2"), self.conv_shapes["conv2"])
        w_qkv = self._effective_weight("attn_qkv")
        w_out = self._effective_weight("attn_out")
        w_mlp1 = self._effective_weight("mlp1")
        w_mlp2 = self._effective_weight("mlp2")

        x = Tensor(rgb)
        feat = ad.relu(ad.conv2d(x, k1, stride=2, pad=1))
        feat = ad.relu(ad.conv2d(feat, k2, stride=2, pad=0))

        d = self.attn_width
        a_disp = 1.0 / self.cfg.min_depth - 1.0 / self.cfg.max_depth
        b_disp = 1.0 / self.cfg.max_depth
        depths: list[Tensor] = []
        for b in range(batch):
            fb = ad.reshape(ad.narrow(feat, 0, b, 1), (d, tokens_n))
            tokens = ad.transpose(fb)                        # (tokens, d)
            qkv = ad.matmul(tokens, w_qkv)
            q = ad.narrow(qkv, 1, 0, d)
            k = ad.narrow(qkv, 1, d, d)
            v = ad.narrow(qkv, 1, 2 * d, d)
            head_outs = []
            for head in range(self.cfg.attention_heads):
                lo = head * self.head_dim
                head_outs.append(ad.scaled_dot_attention(
                    ad.narrow(q, 1, lo, self.head_dim),
                    ad.narrow(k, 1, lo, self.head_dim),
                    ad.narrow(v, 1, lo, self.head_dim)))
            attended = ad.matmul(ad.concat(head_outs, axis=1), w_out)
            tokens = ad.add(tokens, attended)                # residual
            skip = Tensor(np.ascontiguousarray(pooled[b].reshape(3, tokens_n).T))
            feat_tok = ad.concat([tokens, skip], axis=1)     # (tokens, d + 3)
            hidden = ad.gelu(ad.matmul(feat_tok, w_mlp1))
            head_out = ad.matmul(hidden, w_mlp2)
            logits = ad.reshape(ad.tmean(head_out, axis=1), (hp, wp))
            big = ad.upsample_nearest(logits, STRIDE_FACTOR)
            disparity = ad.add(ad.mul(ad.sigmoid(big), a_disp), b_disp)
            depths.append(ad.reciprocal(disparity))
        return depths

    def batch_loss(self, rgb: np.ndarray, gt: np.ndarray) -> Tensor:
        """Mean per-frame training loss over a batch."""
        preds = self.forward(rgb)
        gt = np.asarray(gt, dtype=self.cfg.np_dtype)
        if gt.shape != (len(preds),) + self.cfg.input_size:
            raise ShapeError(f"batch_loss: ground truth shape {gt.shape} does not match "
                             f"({len(preds)}, {self.cfg.input_size[0]}, {self.cfg.input_size[1]})")
        total = training_loss(preds[0], gt[0])
        for i in range(1, len(preds)):
            total = ad.add(total, training_loss(preds[i], gt[i]))
        return ad.mul(total, 1.0 / len(preds))


def build_model(cfg: ModelConfig) -> ToyDepthModel:
    """Deterministic seeded construction; same seed, bit-identical weights."""
    return ToyDepthModel(cfg)


def forward_depth(model: ToyDepthModel, rgb: np.ndarray) -> list[np.ndarray]:
    """Per-frame depth maps as plain arrays, every value in [min_depth, max_depth]."""
    with ad.no_grad():
        return [t.data.copy() for t in model.forward(rgb)]


def training_loss(pred: Tensor, gt, variance_weight: float = 0.5) -> Tensor:
    """Scale-invariant log loss: mean(e^2) - lambda * (mean e)^2, e = ln pred - ln gt.

    Nonnegative for lambda <= 1, zero exactly when pred == gt.
    """
    gt_t = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt_t.shape:
        raise ShapeError(f"training_loss: prediction shape {pred.shape} differs "
                         f"from ground truth {gt_t.shape}")
    if np.any(gt_t.data <= 0) or np.any(pred.data <= 0):
        raise DomainError("training_loss requires strictly positive depths")
    err = ad.sub(ad.log(pred), ad.log(gt_t))
    mean_sq = ad.tmean(ad.square(err))
    mean_err = ad.tmean(err)
    return ad.sub(mean_sq, ad.mul(ad.square(mean_err), variance_weight))
