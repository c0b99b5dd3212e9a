"""Dense tensors with a minimal reverse-mode tape.

A :class:`Tensor` wraps a NumPy array. Operations executed while a
:class:`GradTape` is active and touching at least one tensor with
``requires_grad=True`` are recorded on the tape, in execution order, together
with a vector-Jacobian product closure. :func:`backward` replays the tape in
reverse.

Feature maps use the ``(h, w, c)`` layout throughout (height-major, then
width, then channel) and carry no batch axis.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "FeatureMap",
    "GradTape",
    "as_tensor",
    "feature_map",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "sum_",
    "mean",
    "abs_",
    "pad",
    "crop",
    "concat",
    "conv1x1",
    "dwconv3x3",
    "softmax",
    "gelu",
    "channel_layernorm",
    "temperature_scale",
    "linear_map",
]

_state = threading.local()


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    # feature-map views
    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> int:
        return self.data.shape[2]

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return crop(self, index)


#: A feature map is a rank-3 tensor laid out as (h, w, c).
FeatureMap = Tensor


class GradTape:
    """Records primitive operations in execution order.

    Creation order is a topological order, so the reverse pass is a single
    sweep over ``nodes``. A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> None:
        self.nodes.append((out, parents, vjp))


def _tape_stack() -> list[GradTape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands; bare scalars adopt the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def feature_map(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Wrap an ``(h, w, c)`` array, validating rank and finiteness."""
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise ShapeError(f"feature map must be (h, w, c), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("feature map contains non-finite values")
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Create an op output and record it when gradients are needed."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, tuple(parents), vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate ``d loss / d leaf`` over every node on ``tape``.

    Returns a mapping from each leaf tensor (``requires_grad`` and not produced
    by a recorded op) to its gradient; the gradient is also stored on
    ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(out) for out, _, _ in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, parents, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key not in produced:
                leaves[key] = parent
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        result[leaf] = grads[key]
    return result


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), vjp)


# shape manipulation

def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), vjp)


def crop(a, index) -> Tensor:
    """Basic (slice/int) indexing with a scatter backward."""
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(a.data[index].copy(), (a,), vjp)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def pad(a, pads: Sequence[tuple[int, int]], mode: str = "zero") -> Tensor:
    """Pad leading axes; ``mode`` is ``"zero"`` or ``"reflect"``.

    ``pads`` lists ``(before, after)`` per leading axis; trailing axes are not
    padded.
    """
    a = as_tensor(a)
    pads = list(pads) + [(0, 0)] * (a.ndim - len(pads))
    if mode == "zero":
        out = np.pad(a.data, pads, mode="constant")
        index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, a.shape))
        return _make(out, (a,), lambda g: (g[index],))
    if mode != "reflect":
        raise ValueError(f"unknown padding mode {mode!r}")
    for (lo, hi), n in zip(pads, a.shape):
        if n < 2 and (lo or hi):
            raise ShapeError(f"reflect padding needs an extent of at least 2, got {n}")
    # index maps make the backward a scatter-add along each padded axis
    maps = [np.pad(np.arange(n), p, mode="reflect") for n, p in zip(a.shape, pads)]
    out = a.data
    for axis, idx in enumerate(maps):
        if len(idx) != a.shape[axis]:
            out = np.take(out, idx, axis=axis)

    def vjp(g):
        for axis in reversed(range(a.ndim)):
            idx = maps[axis]
            if len(idx) == a.shape[axis]:
                continue
            moved = np.moveaxis(g, axis, 0)
            acc = np.zeros((a.shape[axis],) + moved.shape[1:], dtype=g.dtype)
            np.add.at(acc, idx, moved)
            g = np.moveaxis(acc, 0, axis)
        return (g,)

    return _make(out, (a,), vjp)


# network primitives

def linear_map(x, weight, bias=None, axis: int = -1) -> Tensor:
    """Apply ``weight`` (in x out) along ``axis`` of ``x``, plus optional bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or weight.shape[0] != x.shape[axis]:
        raise ShapeError(f"weight {weight.shape} incompatible with axis {axis} of {x.shape}")
    last = axis in (-1, x.ndim - 1)
    moved = x if last else transpose(x, _move_to_end(x.ndim, axis))
    y = matmul(moved, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias {bias.shape} does not match output width {weight.shape[1]}")
        y = add(y, bias)
    if not last:
        y = transpose(y, np.argsort(_move_to_end(x.ndim, axis)))
    return y


def _move_to_end(ndim: int, axis: int) -> tuple[int, ...]:
    axis %= ndim
    return tuple(i for i in range(ndim) if i != axis) + (axis,)


def conv1x1(x, weights, bias=None) -> Tensor:
    """Per-position affine channel map; ``weights`` has shape ``(c_in, c_out)``."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"conv1x1 expects an (h, w, c) map, got {x.shape}")
    weights = as_tensor(weights)
    if weights.ndim != 2 or weights.shape[0] != x.c:
        raise ShapeError(f"conv1x1 weights {weights.shape} need input dim {x.c}")
    return linear_map(x, weights, bias)


def _dwconv_valid(xp: Tensor, kernels: Tensor) -> Tensor:
    h, w = xp.shape[0] - 2, xp.shape[1] - 2
    k = kernels.data
    out = np.zeros((h, w, xp.shape[2]), dtype=np.result_type(xp.data, k))
    for dy in range(3):
        for dx in range(3):
            out += xp.data[dy:dy + h, dx:dx + w, :] * k[dy, dx]

    def vjp(g):
        gx = np.zeros_like(xp.data, dtype=g.dtype)
        gk = np.empty_like(k, dtype=g.dtype)
        for dy in range(3):
            for dx in range(3):
                gx[dy:dy + h, dx:dx + w, :] += g * k[dy, dx]
                gk[dy, dx] = np.einsum("hwc,hwc->c", g, xp.data[dy:dy + h, dx:dx + w, :])
        return gx, gk

    return _make(out, (xp, kernels), vjp)


def dwconv3x3(x, kernels, padding: str = "zero") -> Tensor:
    """Depthwise 3x3 convolution (cross-correlation) with ``kernels`` of shape ``(3, 3, c)``."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 3:
        raise ShapeError(f"dwconv3x3 expects an (h, w, c) map, got {x.shape}")
    if kernels.shape != (3, 3, x.c):
        raise ShapeError(f"dwconv3x3 kernels {kernels.shape} need shape (3, 3, {x.c})")
    return _dwconv_valid(pad(x, [(1, 1), (1, 1)], mode=padding), kernels)


def softmax(v, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(v.data - v.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (v,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


_SQRT_HALF = 0.5 ** 0.5
_INV_SQRT_2PI = 1.0 / (2.0 * np.pi) ** 0.5


def gelu(v) -> Tensor:
    """Exact GELU ``x * Phi(x)``."""
    v = as_tensor(v)
    cdf = 0.5 * (1.0 + erf(v.data * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * v.data * v.data)
    return _make(v.data * cdf, (v,), lambda g: (g * (cdf + v.data * pdf),))


def channel_layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise each position's channel vector, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if c == 0:
        raise ShapeError("channel_layernorm over zero channels")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if eps <= 0:
        raise ContractError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    std = np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred / std
    reduce_axes = tuple(range(x.ndim - 1))

    def vjp(g):
        dxhat = g * gamma.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / std
        return dx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), vjp)


def temperature_scale(logits, alpha, head_axis: int, floor: float = 1e-6) -> Tensor:
    """Divide ``logits`` by ``max(|alpha|, floor)``, one temperature per head.

    ``alpha`` has one entry per index of ``head_axis``; the floor keeps an
    all-zero parameter set finite.
    """
    logits, alpha = as_tensor(logits), as_tensor(alpha)
    if alpha.shape != (logits.shape[head_axis],):
        raise ShapeError(f"alpha {alpha.shape} must match head axis of {logits.shape}")
    shape = [1] * logits.ndim
    shape[head_axis] = -1
    mag = np.abs(alpha.data)
    active = mag > floor
    t = np.where(active, mag, floor).reshape(shape)
    out = logits.data / t
    reduce_axes = tuple(i for i in range(logits.ndim) if i != head_axis % logits.ndim)

    def vjp(g):
        dt = -(g * out / t).sum(axis=reduce_axes)
        return g / t, dt * np.sign(alpha.data) * active

    return _make(out, (logits, alpha), vjp)
