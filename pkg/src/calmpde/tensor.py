"""Dense arrays with tape-based reverse-mode differentiation.

Only the primitives the CALM architecture needs are provided. Every op is a
plain function that computes its result with numpy and, when a tape is
active and an input requires gradients, records a node holding the
vector-Jacobian product for that op.

    >>> x = Tensor(np.arange(3.0), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(x * x)
    >>> grads = backward(loss, tape)
    >>> x.grad
    array([0., 2., 4.])
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import erf


class DimensionError(ValueError):
    """Shapes of operands are incompatible."""


class ContractError(RuntimeError):
    """An op was called outside its contract (e.g. backward on a non-scalar)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared while the tape was checking values."""

    def __init__(self, op: str, shape: tuple[int, ...]):
        super().__init__(f"non-finite values produced by '{op}' (output shape {shape})")
        self.op = op
        self.shape = shape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    # numpy must defer to our reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
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

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class Node:
    op: str
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of the differentiable ops executed while active.

    ``check_finite`` raises :class:`NonFiniteError` on the first op whose
    output contains NaN/Inf, naming the op.
    """

    check_finite: bool = False
    nodes: list[Node] = field(default_factory=list)
    visits: int = 0

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False


_TAPES: list[Tape] = []


class no_record:
    """Suspend recording on all tapes inside the block."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)
        return False


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    out = Tensor(data)
    if _TAPES:
        tape = _TAPES[-1]
        if tape.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(op, data.shape)
        if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
            out.requires_grad = True
            tape.nodes.append(Node(op, out, inputs, vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Propagate d(loss) through ``tape`` in reverse recording order.

    Returns a map ``id(tensor) -> gradient`` for every tensor reached, and
    stores the gradient of every leaf (a tensor not produced by a node) in
    its ``.grad`` attribute.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        tape.visits += 1
        produced.add(id(node.out))
        g = grads.get(id(node.out))
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves[key] = t
    for key, t in leaves.items():
        if key not in produced:
            t.grad = grads[key]
    return grads


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {np.shape(a)} with {np.shape(b)}") from e


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.data, b.data)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.data, b.data)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a.data, b.data)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def sin(x: Tensor) -> Tensor:
    return _make("sin", np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    return _make("cos", np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def square(x: Tensor) -> Tensor:
    return _make("square", x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return _make("gelu", out, (x,), vjp)


def norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at 0 is taken as 0."""
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1)
        return (gk * np.where(n > 0, x.data / safe, 0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make("norm", out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", np.sum(x.data, axis=axes, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def _masked_extreme(x: Tensor, axis: int, mask, fn, fill, op: str) -> Tensor:
    axis %= x.ndim
    vals = x.data if mask is None else np.where(mask, x.data, fill)
    idx = fn(vals, axis=axis, keepdims=True)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(op, np.squeeze(out, axis=axis), (x,), vjp)


def amin(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Minimum over ``axis`` restricted to ``mask``; gradient goes to the first argmin."""
    return _masked_extreme(x, axis, mask, np.argmin, np.inf, "amin")


def amax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    return _masked_extreme(x, axis, mask, np.argmax, -np.inf, "amax")


def reshape(x: Tensor, shape) -> Tensor:
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def broadcast_to(x: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {x.shape} to {tuple(shape)}") from e
    return _make("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ref = xs[0].ndim
    axis %= ref
    for x in xs:
        if x.ndim != ref or any(x.shape[i] != xs[0].shape[i] for i in range(ref) if i != axis):
            raise DimensionError(f"concat shapes disagree: {[x.shape for x in xs]}")
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_lastdim(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=-1)


# ---------------------------------------------------------------------------
# indexing


def scatter_add(g: np.ndarray, idx: np.ndarray, n: int, axis: int = 0) -> np.ndarray:
    """Adjoint of :func:`gather_rows`: sum ``g`` slices into ``n`` rows by ``idx``.

    ``g`` has shape ``pre + idx.shape + post`` where ``pre`` are the ``axis``
    leading dimensions. Repeated indices accumulate.
    """
    idx = np.asarray(idx)
    flat = idx.reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= n):
        raise IndexError(f"scatter index out of range for {n} rows")
    pre = g.shape[:axis]
    post = g.shape[axis + idx.ndim:]
    g2 = g.reshape(pre + (flat.size,) + post)
    g2 = np.moveaxis(g2, axis, 0).reshape(flat.size, -1)
    mat = sp.csr_matrix((np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))), shape=(n, flat.size))
    out = np.asarray(mat @ g2).reshape((n,) + pre + post)
    return np.moveaxis(out, 0, axis)


def gather_rows(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Select slices of ``x`` along ``axis``; ``idx`` may have any shape."""
    idx = np.asarray(idx, dtype=np.intp)
    axis %= x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for extent {n}")
    out = np.take(x.data, idx, axis=axis)
    return _make("gather", out, (x,), lambda g: (scatter_add(g, idx, n, axis),))


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(str(e)) from e

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get weight 0."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = (xc * inv).astype(x.dtype, copy=False)
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    def vjp(g):
        gh = g * gain.data if gain is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape) if gain is not None else None
        gb = _unbroadcast(g, bias.shape) if bias is not None else None
        return gx.astype(x.dtype, copy=False), gg, gb

    inputs = (x,) + ((gain,) if gain is not None else (None,)) + ((bias,) if bias is not None else (None,))
    return _make("layer_norm", out, inputs, vjp)


layer_norm_qk = layer_norm
