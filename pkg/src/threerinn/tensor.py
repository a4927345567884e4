"""Small dense tensor engine with reverse-mode differentiation.

Everything the network needs is here: elementwise arithmetic, a handful of
nonlinearities, channel concat/split, reductions, a fixed 3x3 convolution and
a separable "valid" filter used by SSIM.  Arrays are plain numpy; a tensor
produced from at least one ``requires_grad`` input records a node
``(parents, backward_fn)`` and :func:`backward` replays those nodes in reverse
topological order.

Broadcasting is intentionally narrow: equal shapes, scalar-vs-tensor, and a
per-channel ``(1, C, 1, 1)`` / ``(C,)``-style operand against ``(B, C, H, W)``.
"""

from __future__ import annotations

import builtins
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-D real array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: tuple[tuple[Tensor, ...], BackwardFn] | None = None

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # --- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def record(out: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out`` as a tensor, attaching a graph node when needed.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per parent, in order.
    """
    t = Tensor(out)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = (tuple(parents), backward_fn)
    return t


# --- broadcasting helpers ---------------------------------------------------
def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    if int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if len(big) == 4:
        # per-channel operand: (C,1,1), (1,C,1,1) or equal leading extents
        padded = (1,) * (4 - len(small)) + tuple(small)
        if all(s == 1 or s == g for s, g in zip(padded, big)):
            if padded[2] == 1 and padded[3] == 1:
                return
    raise ShapeError(f"unsupported broadcast between shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, s in enumerate(shape) if s == 1 and g.shape[i + ndiff] != 1
    )
    r = g.sum(axis=axes, dtype=np.float64) if axes else g
    return np.asarray(r, dtype=g.dtype).reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    _check_broadcast(a.shape, b.shape)
    return a, b


# --- elementwise binary ops -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return record(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("division by a tensor containing zeros")
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return record(out, (a, b), bw)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(take_a, g, 0), sa), _unbroadcast(np.where(take_a, 0, g), sb)),
    )


# --- elementwise unary ops --------------------------------------------------
def neg(x: Tensor) -> Tensor:
    return record(-x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    xd = x.data
    return record(np.log(xd), (x,), lambda g: (g / xd,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xd = x.data
    return record(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return record(xd * xd, (x,), lambda g: (2 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    xd = x.data
    if np.any(xd < 0):
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(xd)

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g * 0.5 / safe, 0),)

    return record(out, (x,), bw)


def power(x: Tensor, p: float) -> Tensor:
    """``x ** p`` for nonnegative ``x`` (used for display gamma)."""
    xd = x.data
    if np.any(xd < 0):
        raise NonFiniteError("power of a negative value")
    out = xd**p

    def bw(g):
        safe = np.where(xd > 0, xd, 1)
        d = np.where(xd > 0, p * safe ** (p - 1), 1.0 if p == 1 else 0.0)
        return (g * d.astype(xd.dtype),)

    return record(out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record(out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1 + np.tanh(0.5 * x.data))
    return record(out, (x,), lambda g: (g * out * (1 - out),))


def leaky_relu(x: Tensor, negative_slope: float = 0.2) -> Tensor:
    """``max(x, slope*x)``; the subgradient at 0 is ``slope``."""
    pos = x.data > 0
    slope = x.dtype.type(negative_slope)
    out = np.where(pos, x.data, slope * x.data)
    return record(out, (x,), lambda g: (np.where(pos, g, slope * g),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; gradient passes where ``lo <= x <= hi``."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return record(np.clip(xd, lo, hi), (x,), lambda g: (np.where(inside, g, 0),))


# --- reductions -------------------------------------------------------------
def _axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _axes(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, dtype=np.float64), dtype=x.dtype)
    shape = x.shape
    keep = tuple(1 if i in axes else s for i, s in enumerate(shape))
    return record(out, (x,), lambda g: (np.broadcast_to(g.reshape(keep), shape).copy(),))


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.asarray(x.data.mean(axis=axes, dtype=np.float64), dtype=x.dtype)
    shape = x.shape
    keep = tuple(1 if i in axes else s for i, s in enumerate(shape))
    scale = x.dtype.type(1.0 / n)
    return record(out, (x,), lambda g: (np.broadcast_to(g.reshape(keep) * scale, shape).copy(),))


# --- structural -------------------------------------------------------------
def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"cannot concat shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not add up to extent {x.shape[axis]}")
    parts = []
    start = 0
    shape, dtype = x.shape, x.dtype
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def bw(g, index=index):
            full = np.zeros(shape, dtype=dtype)
            full[index] = g
            return (full,)

        parts.append(record(x.data[index], (x,), bw))
        start += size
    return parts


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# --- convolution ------------------------------------------------------------
def _im2col3(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, 3, 3, h, w), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(b, c * 9, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """3x3, stride 1, zero padding 1 cross-correlation over NCHW input."""
    if weight.ndim != 4 or weight.shape[2:] != (3, 3) or padding != 1:
        raise ShapeError(f"conv2d supports 3x3 kernels with padding 1, got weight {weight.shape}")
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}"
        )
    b, c, h, w = x.shape
    cout = weight.shape[0]
    w2 = weight.data.reshape(cout, c * 9)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.matmul(w2, _im2col3(xp, h, w)).reshape(b, cout, h, w)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    xd = x.data

    def bw(g):
        g2 = g.reshape(b, cout, h * w)
        gx = gw = gb = None
        if weight.requires_grad:
            cols = _im2col3(np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1))), h, w)
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
            gw = gw.astype(xd.dtype).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(b, c, 3, 3, h, w)
            gxp = np.zeros((b, c, h + 2, w + 2), dtype=xd.dtype)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i : i + h, j : j + w] += gcols[:, :, i, j]
            gx = gxp[:, :, 1:-1, 1:-1]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(xd.dtype)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(out, parents, bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return record(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def im2col3(x: Tensor) -> Tensor:
    """Column buffer of a channel-major ``(C, B, H, W)`` tensor for 3x3 kernels.

    Returns ``(C*9, B*H*W)`` with rows ordered ``(c, ky, kx)``, matching a
    ``(Cout, C, 3, 3)`` weight reshaped to ``(Cout, C*9)``.
    """
    c, b, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, b, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w]

    def bw(g):
        g6 = g.reshape(c, 3, 3, b, h, w)
        gxp = np.zeros((c, b, h + 2, w + 2), dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i : i + h, j : j + w] += g6[:, i, j]
        return (gxp[:, :, 1:-1, 1:-1],)

    return record(cols.reshape(c * 9, b * h * w), (x,), bw)


def dense_layer(cols: Sequence[Tensor], weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution of a channel concatenation, given each part's columns.

    ``cols[i]`` is :func:`im2col3` of the i-th concatenated input; ``weight``
    is ``(Cout, sum(Cin_i), 3, 3)``.  Output is ``(Cout, B*H*W)``.  Equivalent
    to ``conv2d(concat(parts), weight, bias)`` without rebuilding columns for
    inputs shared between layers.
    """
    cols = tuple(cols)
    cout = weight.shape[0]
    k_total = weight.shape[1] * 9
    provided = builtins.sum(c.shape[0] for c in cols)
    if provided != k_total:
        raise ShapeError(
            f"dense_layer: inputs provide {provided} rows, weight {weight.shape} needs {k_total}"
        )
    w2 = weight.data.reshape(cout, k_total)
    bounds = np.cumsum([0] + [c.shape[0] for c in cols])
    out = np.matmul(w2[:, bounds[0] : bounds[1]], cols[0].data)
    for i in range(1, len(cols)):
        out += np.matmul(w2[:, bounds[i] : bounds[i + 1]], cols[i].data)
    out += bias.data[:, None]

    def bw(g):
        grads = []
        for i, c in enumerate(cols):
            grads.append(np.matmul(w2[:, bounds[i] : bounds[i + 1]].T, g) if c.requires_grad else None)
        gw = None
        if weight.requires_grad:
            gw = np.empty_like(w2)
            for i, c in enumerate(cols):
                gw[:, bounds[i] : bounds[i + 1]] = np.matmul(g, c.data.T)
            gw = gw.reshape(weight.shape)
        gb = g.sum(axis=1, dtype=np.float64).astype(g.dtype) if bias.requires_grad else None
        return (*grads, gw, gb)

    return record(out, (*cols, weight, bias), bw)


def separable_filter_valid(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Per-channel 'valid' correlation with the outer product ``kernel x kernel``."""
    k = np.asarray(kernel, dtype=x.dtype)
    n = k.size
    h, w = x.shape[-2:]
    if h < n or w < n:
        raise ShapeError(f"input {x.shape} smaller than the {n}x{n} filter window")
    ho, wo = h - n + 1, w - n + 1
    xd = x.data
    tmp = np.zeros(xd.shape[:-2] + (ho, w), dtype=xd.dtype)
    for t in range(n):
        tmp += k[t] * xd[..., t : t + ho, :]
    out = np.zeros(xd.shape[:-2] + (ho, wo), dtype=xd.dtype)
    for t in range(n):
        out += k[t] * tmp[..., :, t : t + wo]

    def bw(g):
        gt = np.zeros(xd.shape[:-2] + (ho, w), dtype=xd.dtype)
        for t in range(n):
            gt[..., :, t : t + wo] += k[t] * g
        gx = np.zeros(xd.shape, dtype=xd.dtype)
        for t in range(n):
            gx[..., t : t + ho, :] += k[t] * gt
        return (gx,)

    return record(out, (x,), bw)


# --- differentiation --------------------------------------------------------
def _build_tape(root: Tensor) -> list[Tensor]:
    """Tensors with graph nodes reachable from ``root``, in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node[0]:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor the scalar ``loss`` depends on.

    The graph is consumed: calling this twice without rebuilding the forward
    computation raises ``RuntimeError``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a single-element loss, got shape {loss.shape}")
    if loss._node is None:
        raise RuntimeError("empty tape: loss was not produced by a recorded computation")
    tape = _build_tape(loss)
    loss.grad = np.ones_like(loss.data)
    for t in reversed(tape):
        node = t._node
        if node is None or t.grad is None:
            continue
        parents, fn = node
        grads = fn(t.grad)
        for p, g in zip(parents, grads):
            if g is None or not p.requires_grad:
                continue
            g = np.asarray(g, dtype=p.dtype).reshape(p.shape)
            p.grad = g if p.grad is None else p.grad + g
    for t in tape:
        t._node = None


def grad_norm(tensors: Iterable[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(np.square(t.grad, dtype=np.float64)))
    return float(np.sqrt(total))
