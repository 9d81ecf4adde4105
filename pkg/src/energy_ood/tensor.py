"""Dense float64 tensors with a reverse-mode gradient tape.

Forward operations record themselves on the active :class:`GradTape` when at
least one operand requires gradients. ``backward`` replays the tape in
reverse recording order, which is a reverse topological order because an
operation can only consume tensors that already exist.

Broadcasting is deliberately limited: binary elementwise operations accept
either equal shapes or a right operand whose shape equals the left operand's
shape without its leading batch dimension (a bias row). Every other mismatch
raises :class:`DimensionError`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError, NumericError

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "shift",
    "square",
    "relu",
    "softplus",
    "matmul",
    "transpose",
    "reshape",
    "flatten",
    "tensor_sum",
    "mean",
    "logsumexp",
    "take",
    "pick",
    "concat",
    "conv2d",
    "max_pool2d",
]


class Tensor:
    """Immutable n-dimensional float64 array that may participate in a tape."""

    __slots__ = ("_data", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, allow_nonfinite: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        self._init(arr, requires_grad, allow_nonfinite)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Internal constructor for freshly computed arrays: no defensive copy.
        t = cls.__new__(cls)
        t._init(np.asarray(arr, dtype=np.float64), requires_grad, False)
        return t

    def _init(self, arr, requires_grad, allow_nonfinite):
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    name: str
    out: Tensor
    inputs: tuple
    vjp: Callable


_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class GradTape:
    """Ordered record of primitive operations for one backward pass.

    A tape is single-threaded; use one per training step::

        with GradTape() as tape:
            loss = mean(square(w))
        (gw,) = tape.backward(loss, [w])
    """

    nodes: list = field(default_factory=list)
    last_backward_order: list = field(default_factory=list)

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, name, out, inputs, vjp):
        out._tape = self
        self.nodes.append(_Node(name, out, inputs, vjp))

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> list:
        """Return ``d loss / d p`` for every ``p`` in ``params``.

        Parameters the loss does not depend on receive zero gradients.
        """
        if loss.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        order = []
        for index in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[index]
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            order.append(index)
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self.last_backward_order = order
        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape))
        return out


def backward(loss: Tensor, params: Sequence[Tensor]) -> list:
    """Gradients of a scalar ``loss`` with respect to ``params``."""
    if loss._tape is None:
        raise ContractError("loss is not connected to a gradient tape")
    return loss._tape.backward(loss, params)


def _emit(name, arr, inputs, vjp) -> Tensor:
    need = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=need)
    tape = _active_tape()
    if need and tape is not None:
        tape.record(name, out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_binary(a: Tensor, b: Tensor, op: str) -> bool:
    """Return True when ``b`` is a bias row broadcast over ``a``'s batch axis."""
    if a.shape == b.shape:
        return False
    if a.ndim >= 1 and b.shape == a.shape[1:]:
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def add(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_binary(a, b, "add")

    def vjp(g):
        return g, (g.sum(axis=0) if bias else g)

    return _emit("add", a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_binary(a, b, "sub")

    def vjp(g):
        return g, -(g.sum(axis=0) if bias else g)

    return _emit("sub", a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bias = _check_binary(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        gb = g * ad
        return g * bd, (gb.sum(axis=0) if bias else gb)

    return _emit("mul", ad * bd, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    return _emit("shift", a.data + float(c), (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(a))`` evaluated without overflow."""
    ad = a.data
    return _emit("softplus", np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid(ad),))


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    try:
        arr = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} into {shape}") from exc
    return _emit("reshape", arr, (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading batch dimension."""
    return reshape(a, (a.shape[0], -1))


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))
    axis = axis % a.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _emit("sum", a.data.sum(axis=axis), (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    if a.size == 0:
        raise DomainError("mean of an empty tensor")
    n = a.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis), 1.0 / n)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted ``log(sum(exp(a)))`` along ``axis``."""
    if a.ndim == 0:
        raise DomainError("logsumexp needs at least one axis")
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise DomainError("logsumexp over an empty axis")
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    e = np.exp(ad - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s

    def vjp(g):
        return (np.expand_dims(g, axis) * soft,)

    return _emit("logsumexp", out, (a,), vjp)


def take(a: Tensor, index) -> Tensor:
    """Rows ``a[index]`` along the leading axis; repeated indices are allowed."""
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1:
        raise DimensionError("take expects a 1-D index array")
    if index.size and (index.min() < -len(a) or index.max() >= len(a)):
        raise DimensionError(f"take: index out of range for leading extent {len(a)}")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit("take", a.data[index], (a,), vjp)


def pick(a: Tensor, cols) -> Tensor:
    """``a[i, cols[i]]`` for each row ``i`` of a matrix."""
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise DimensionError(f"pick: shapes {a.shape} and {cols.shape} are incompatible")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return _emit("pick", a.data[rows, cols], (a,), vjp)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the leading axis."""
    parts = tuple(parts)
    if not parts:
        raise DimensionError("concat of nothing")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise DimensionError(f"concat: trailing shapes {tail} and {p.shape[1:]} differ")
    bounds = np.cumsum([0] + [len(p) for p in parts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat", np.concatenate([p.data for p in parts], axis=0), parts, vjp)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``kernel`` (O,C,kh,kw).

    The kernel is not flipped. Output spatial size is
    ``(H + 2*padding - kh) // stride + 1``. ``bias`` has shape (O,).
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {kc} ({x.shape} vs {kernel.shape})")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    kd = kernel.data
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def vjp(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, kd, axes=([1], [0]))  # n, ho, wo, c, kh, kw
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", np.ascontiguousarray(out), inputs, vjp)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; H and W must be divisible by ``size``.

    Gradient flows to the first maximal element of each window.
    """
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: spatial size {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    windows = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _emit("max_pool2d", out, (x,), vjp)
