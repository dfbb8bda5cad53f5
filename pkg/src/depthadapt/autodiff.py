"""Dense-tensor reverse-mode differentiation engine.

Small engine backing the toy depth network: float32 by default, float64
for gradient checking, tensors immutable outside explicit parameter
updates, and a fixed accumulation order so that results are reproducible
and naive sequential references can match them exactly.

Matrix products accumulate over the inner dimension left to right, which
matches a triple-loop reference bit for bit in the same dtype. Broadcasting
is restricted to scalar-with-tensor and trailing-dimension expansion;
anything else raises ShapeError.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DomainError, ShapeError

DEFAULT_DTYPE = np.float32

_SQRT_2_OVER_PI = 0.7978845608028654
_GELU_CUBIC = 0.044715

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph construction (cheap eval forwards)."""

    def __enter__(self) -> "no_grad":
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc) -> bool:
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A dense array plus the bookkeeping reverse mode needs.

    ``data`` is a C-contiguous float32 or float64 ndarray. Tensors are
    immutable after construction except through ``update_``/``assign_``,
    which the trainer uses for in-place parameter steps.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        if isinstance(data, Tensor):
            raise ContractError("Tensor() wraps array data, not another Tensor")
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def update_(self, delta: np.ndarray) -> None:
        """In-place parameter update, trainer-only by convention."""
        delta = np.asarray(delta)
        if not self.is_leaf:
            raise ContractError("only leaf parameters can be updated in place")
        if delta.shape != self.data.shape:
            raise ShapeError(f"update_ shape {delta.shape} does not match parameter {self.data.shape}")
        self.data += delta.astype(self.data.dtype, copy=False)

    def assign_(self, values: np.ndarray) -> None:
        """Replace parameter values in place (same shape and dtype)."""
        values = np.asarray(values)
        if not self.is_leaf:
            raise ContractError("only leaf parameters can be assigned in place")
        if values.shape != self.data.shape:
            raise ShapeError(f"assign_ shape {values.shape} does not match parameter {self.data.shape}")
        self.data = np.ascontiguousarray(values.astype(self.data.dtype, copy=True))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"<Tensor shape={self.shape} dtype={self.data.dtype}{tag} requires_grad={self.requires_grad}>"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


GradientMap = dict  # leaf Tensor -> gradient Tensor of identical shape


def tensor(data, requires_grad: bool = False, dtype=None, name: Optional[str] = None) -> Tensor:
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# graph plumbing


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(out_data: np.ndarray, parents: tuple, backward_fn: Callable, name: str) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(out_data, requires_grad=True, name=name,
                      _parents=parents, _backward=backward_fn)
    return Tensor(out_data, name=name)


def _check_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    """Allow equal shapes, scalars, and trailing-dimension expansion only."""
    if sa == sb:
        return
    if _size(sa) == 1 or _size(sb) == 1:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible "
                     "(only scalar and trailing-dimension expansion are supported)")


def _size(shape: tuple) -> int:
    return int(np.prod(shape, dtype=np.int64)) if shape else 1


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if _size(shape) == 1:
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# elementwise and reduction operations


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtype("add", a, b)
    _check_broadcast("add", a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(out, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtype("sub", a, b)
    _check_broadcast("sub", a.shape, b.shape)
    out = a.data - b.data

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtype("mul", a, b)
    _check_broadcast("mul", a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward, "mul")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        return (g * (a.data > 0).astype(a.data.dtype),)

    return _make(out, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # numerically stable split by sign
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward, "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    x = a.data
    u = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x ** 3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        sech2 = 1.0 - th ** 2
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * du),)

    return _make(out, (a,), backward, "gelu")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive values")
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(out, (a,), backward, "log")


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def backward(g):
        return (g * (2.0 * a.data),)

    return _make(out, (a,), backward, "square")


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise DomainError("reciprocal requires nonzero values")
    out = 1.0 / a.data

    def backward(g):
        return (-g * out * out,)

    return _make(out, (a,), backward, "reciprocal")


def _normalize_axis(axis: Optional[int], ndim: int, op: str) -> Optional[int]:
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for {ndim} dimensions")
    return axis % ndim


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    axis = _normalize_axis(axis, a.data.ndim, "sum")
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(a.shape, g, dtype=a.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.data.dtype, copy=True),)

    return _make(np.asarray(out, dtype=a.data.dtype), (a,), backward, "sum")


def tmean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    axis = _normalize_axis(axis, a.data.ndim, "mean")
    out = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.shape[axis]
    inv = 1.0 / count

    def backward(g):
        if axis is None:
            return (np.full(a.shape, g * inv, dtype=a.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g * inv, axis), a.shape).astype(a.data.dtype, copy=True),)

    return _make(np.asarray(out, dtype=a.data.dtype), (a,), backward, "mean")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if _size(shape) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(int(x) for x in axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make(out, (a,), backward, "transpose")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = _normalize_axis(axis, a.data.ndim, "narrow")
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: window [{start}, {start + length}) exceeds axis {axis} "
                         f"of shape {a.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = np.ascontiguousarray(a.data[index])

    def backward(g):
        full = np.zeros(a.shape, dtype=a.data.dtype)
        full[index] = g
        return (full,)

    return _make(out, (a,), backward, "narrow")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    _check_dtype("concat", *tensors)
    axis = _normalize_axis(axis, tensors[0].data.ndim, "concat")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        grads, off = [], 0
        for size in sizes:
            index = [slice(None)] * g.ndim
            index[axis] = slice(off, off + size)
            grads.append(np.ascontiguousarray(g[tuple(index)]))
            off += size
        return tuple(grads)

    return _make(out, tuple(tensors), backward, "concat")


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of a 2-D map by an integer factor."""
    if a.data.ndim != 2:
        raise ShapeError(f"upsample_nearest expects a 2-D tensor, got shape {a.shape}")
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    h, w = a.shape
    out = np.repeat(np.repeat(a.data, factor, axis=0), factor, axis=1)

    def backward(g):
        return (g.reshape(h, factor, w, factor).sum(axis=(1, 3)),)

    return _make(out, (a,), backward, "upsample_nearest")


# ---------------------------------------------------------------------------
# matrix and convolution kernels


def ordered_matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with fixed left-to-right accumulation over the inner axis.

    Bit-identical to a sequential triple loop in the same dtype, which keeps
    training runs reproducible and lets exact-equality oracles apply.
    """
    m, kk = a.shape
    n = b.shape[1]
    if kk == 0:
        return np.zeros((m, n), dtype=a.dtype)
    at = np.ascontiguousarray(a.T)
    out = np.multiply(at[0][:, None], b[0])
    if kk == 1:
        return out
    buf = np.empty_like(out)
    for t in range(1, kk):
        np.multiply(at[t][:, None], b[t], out=buf)
        out += buf
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    out = ordered_matmul_data(a.data, b.data)

    def backward(g):
        ga = ordered_matmul_data(g, np.ascontiguousarray(b.data.T))
        gb = ordered_matmul_data(np.ascontiguousarray(a.data.T), g)
        return (ga, gb)

    return _make(out, (a, b), backward, "matmul")


def _conv_output_extent(extent: int, k: int, stride: int, pad: int) -> int:
    padded = extent + 2 * pad
    if k > padded:
        raise ConfigError(f"kernel extent {k} exceeds padded input extent {padded}")
    if (padded - k) % stride != 0:
        raise ConfigError(f"conv2d output extent is not integral: "
                          f"(({extent} + 2*{pad}) - {k}) is not divisible by stride {stride}")
    return (padded - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    ho = _conv_output_extent(h, kh, stride, pad)
    wo = _conv_output_extent(w, kw, stride, pad)
    if pad:
        padded = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        padded[:, :, pad:pad + h, pad:pad + w] = x
    else:
        padded = x
    cols = np.empty((b, ho, wo, c, kh, kw), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patch = padded[:, :, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride]
            cols[:, :, :, :, dy, dx] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(b * ho * wo, c * kh * kw), (b, c, h, w, ho, wo, padded.shape)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with an (O, C, kh, kw) kernel."""
    _check_dtype("conv2d", x, kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")
    o, c, kh, kw = kernel.shape
    if c != x.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    cols, (b, _, h, w, ho, wo, padded_shape) = _im2col(x.data, kh, kw, stride, pad)
    k2 = kernel.data.reshape(o, c * kh * kw)
    out2 = ordered_matmul_data(cols, np.ascontiguousarray(k2.T))
    out = np.ascontiguousarray(out2.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, o)
        gk2 = ordered_matmul_data(np.ascontiguousarray(g2.T), cols)
        gcols = ordered_matmul_data(g2, k2)
        gcols = gcols.reshape(b, ho, wo, c, kh, kw)
        gpad = np.zeros(padded_shape, dtype=g.dtype)
        for dy in range(kh):
            for dx in range(kw):
                gpad[:, :, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride] += \
                    gcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
        gx = gpad[:, :, pad:pad + h, pad:pad + w] if pad else gpad
        return (np.ascontiguousarray(gx), gk2.reshape(o, c, kh, kw))

    return _make(out, (x, kernel), backward, "conv2d")


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, shift-stabilized."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward, "softmax_rows")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with the softmax taken per query row."""
    _check_dtype("scaled_dot_attention", q, k, v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("scaled_dot_attention expects 2-D q, k, v")
    if k.shape[0] == 0:
        raise ShapeError("scaled_dot_attention: empty context (no key/value rows)")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"scaled_dot_attention: feature extents differ, q {q.shape} vs k {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"scaled_dot_attention: k has {k.shape[0]} rows but v has {v.shape[0]}")
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return matmul(softmax_rows(scores), v)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode gradients of a scalar loss for every reachable leaf.

    Returns a map from leaf tensor (requires_grad=True) to a gradient
    tensor of identical shape; leaves the loss does not reach are absent.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise DomainError("backward: loss is not finite")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not reach any requires_grad leaf")

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: GradientMap = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                result[node] = Tensor(g)
            continue
        for parent, contrib in zip(node._parents, node._backward(g)):
            if contrib is None or not parent.requires_grad:
                continue
            held = grads.get(id(parent))
            grads[id(parent)] = contrib if held is None else held + contrib
    return result
