"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while a :class:`Tape` is active and
at least one operand has ``requires_grad=True`` appends a node to that tape.
:func:`backward` walks the nodes in reverse append order, which is a valid
reverse topological order because a node's inputs always precede it.

Broadcasting follows numpy: shapes are right-aligned and dimensions of size 1
stretch to match. Gradients flowing back into a broadcast operand are summed
over the stretched axes.

A tape is consumed by ``backward``. Calling ``backward`` again on a tensor from
the same forward pass raises :class:`StaleTapeError`; recording new operations
starts a fresh generation on the same tape.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.generation = 0
        self.consumed = False

    def record(self, op, inputs, output, backward_fn) -> int:
        if self.consumed:
            self.reset()
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))
        return len(self.nodes) - 1

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


_active_tape: contextvars.ContextVar[Optional[Tape]] = contextvars.ContextVar(
    "tabmtr_active_tape", default=None
)


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


@contextlib.contextmanager
def recording(tape: Optional[Tape] = None) -> Iterator[Tape]:
    """Activate ``tape`` (a new one by default) for the duration of the block."""
    tape = Tape() if tape is None else tape
    token = _active_tape.set(tape)
    try:
        yield tape
    finally:
        _active_tape.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        # (tape, generation, index) for tensors produced by a recorded op
        self.node_id: Optional[tuple] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        idx = tape.record(op, inputs, out, backward_fn)
        out.node_id = (tape, tape.generation, idx)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** exponent, "pow", (a,),
                 lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("log of negative input")
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    return _make(out, "log", (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient 0 at 0
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "softplus", (a,), lambda g: (g * sig,))


def where(condition, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``condition`` holds, else ``b``."""
    cond = np.asarray(condition, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = unbroadcast(np.where(cond, g, 0.0), sa) if a.requires_grad else None
        gb = unbroadcast(np.where(cond, 0.0, g), sb) if b.requires_grad else None
        return ga, gb

    return _make(out, "where", (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        # one BLAS call for (..., n) @ (n, p)
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
    else:
        out = np.matmul(ad, bd)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(g.shape[:-1] + (bd.shape[0],))
            else:
                ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            ga = unbroadcast(ga, ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(a.data[index], "getitem", (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat",
                 tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), "stack", tensors, backward)


def gather_rows(table, index) -> Tensor:
    """Rows ``table[index]`` of a 2-D table; ``index`` may be an int or int array."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_rows: index must be integer")
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"gather_rows: index out of range for table with {n_rows} rows")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], "gather_rows", (table,), backward)


# ---------------------------------------------------------------------------
# reductions and normalizers


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} is invalid for a {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def reduce(a, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    x = a.data
    shape = x.shape
    kept_shape = tuple(1 if axes is None or i in axes else n for i, n in enumerate(shape))
    if kind == "sum":
        out = x.sum(axis=axes, keepdims=keepdims)
        return _make(out, "sum", (a,),
                     lambda g: (np.broadcast_to(g.reshape(kept_shape), shape).copy(),))
    if kind == "mean":
        count = x.size if axes is None else int(np.prod([shape[i] for i in axes]))
        out = x.mean(axis=axes, keepdims=keepdims)
        return _make(out, "mean", (a,),
                     lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, shape).copy(),))
    if kind == "max":
        if axes is not None and len(axes) != 1:
            raise ShapeError("max reduces over a single axis or over everything")
        out = x.max(axis=axes, keepdims=keepdims)

        def backward(g):
            full = np.zeros(shape, dtype=DTYPE)
            if axes is None:
                full.reshape(-1)[np.argmax(x)] = g.reshape(())
            else:
                ax = axes[0]
                first = np.expand_dims(np.argmax(x, axis=ax), ax)
                np.put_along_axis(full, first, g.reshape(kept_shape), axis=ax)
            return (full,)

        return _make(out, "max", (a,), backward)
    raise ValueError(f"unknown reduction {kind!r}")


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction. NaN inputs propagate NaN."""
    a = as_tensor(a)
    if a.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    x = a.data
    out = x - x.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (a,), backward)


softmax_rows = softmax


def _row_max(x: np.ndarray) -> np.ndarray:
    # slice-wise maximum beats ndarray.max on short trailing axes
    m = x[..., 0].copy()
    for j in range(1, x.shape[-1]):
        np.maximum(m, x[..., j], out=m)
    return m[..., None]


def _row_sum(x: np.ndarray) -> np.ndarray:
    return (x @ np.ones(x.shape[-1]))[..., None]


def _t(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))


def attention(q, k, v, scale: float, drop_mask: Optional[np.ndarray] = None):
    """Fused ``softmax(q k^T * scale) [* drop_mask] @ v`` over the last two axes.

    ``drop_mask`` is an already rescaled dropout mask (zeros and 1/(1-rate)).
    Returns ``(context, weights)`` where ``weights`` are the attention
    probabilities before dropout.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    # batched matmul is much faster on contiguous operands
    qd, kd, vd = (np.ascontiguousarray(t.data) for t in (q, k, v))
    scores = np.matmul(qd, _t(kd))
    scores *= scale
    scores -= _row_max(scores)
    np.exp(scores, out=scores)
    scores /= _row_sum(scores)
    probs = scores
    used = probs if drop_mask is None else probs * drop_mask
    out = np.matmul(used, vd)

    def backward(g):
        g = np.ascontiguousarray(g)
        g_used = np.matmul(g, _t(vd))
        gv = np.matmul(_t(used), g) if v.requires_grad else None
        g_probs = g_used if drop_mask is None else g_used * drop_mask
        g_scores = probs * (g_probs - _row_sum(g_probs * probs))
        g_scores *= scale
        gq = np.matmul(g_scores, kd) if q.requires_grad else None
        gk = np.matmul(_t(g_scores), qd) if k.requires_grad else None
        return gq, gk, gv

    return _make(out, "attention", (q, k, v), backward), probs


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Fused normalisation over the last axis followed by ``* gain + shift``."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    xd = x.data
    n = xd.shape[-1]
    mean_w = np.full(n, 1.0 / n)
    centered = xd - (xd @ mean_w)[..., None]
    inv_std = 1.0 / np.sqrt(((centered * centered) @ mean_w)[..., None] + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + shift.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv_std * (gh - (gh @ mean_w)[..., None] - xhat * ((gh * xhat) @ mean_w)[..., None])
        lead = g.reshape(-1, n)
        gg = (lead * xhat.reshape(-1, n)).sum(axis=0) if gain.requires_grad else None
        gs = lead.sum(axis=0) if shift.requires_grad else None
        return gx, unbroadcast(gg, gain.shape) if gg is not None else None, \
            unbroadcast(gs, shift.shape) if gs is not None else None

    return _make(out, "layer_norm", (x, gain, shift), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, wrt: Optional[Sequence[Tensor]] = None):
    """Propagate d(loss) to every leaf reachable from ``loss``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``. Leaves that
    were used in the forward pass but receive no gradient get zeros. When
    ``wrt`` is given, returns their gradients (zeros for unreachable ones).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None:
        raise StaleTapeError("loss is not on an active tape")
    tape, generation, index = loss.node_id
    if tape.generation != generation or tape.consumed:
        raise StaleTapeError("tape already consumed; run a new forward pass first")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen_leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: index + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            for t in node.inputs:
                if t.requires_grad and t.node_id is None:
                    seen_leaves.setdefault(id(t), t)
            continue
        input_grads = node.backward(g)
        for t, gi in zip(node.inputs, input_grads):
            if not t.requires_grad:
                continue
            if t.node_id is None:
                seen_leaves.setdefault(id(t), t)
                if gi is None:
                    continue
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            elif gi is not None:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    for t in seen_leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    tape.consumed = True
    tape.nodes = []

    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
