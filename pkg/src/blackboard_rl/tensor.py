"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive appends one record to the thread's active
:class:`Tape`.  :func:`backward` walks that tape in exact reverse recording
order and then discards it, so each forward pass gets a fresh tape.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class DetachedError(RuntimeError):
    """backward() was called on a tensor with no live tape node."""


class MissingGradError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


@dataclass
class _Record:
    kind: str
    inputs: tuple
    out: "Tensor"
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    records: list = field(default_factory=list)
    closed: bool = False

    def record(self, kind, inputs, out, backward) -> int:
        self.records.append(_Record(kind, tuple(inputs), out, backward))
        return len(self.records) - 1

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class Node:
    tape: Tape
    index: int


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def active_tape() -> Tape:
    return _state.tape


def reset_tape() -> None:
    """Drop everything recorded so far; outstanding graphs become detached."""
    _state.tape.closed = True
    _state.tape.records.clear()
    _state.tape = Tape()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def grad_mode(enabled: bool):
    prev = _state.grad_enabled
    _state.grad_enabled = bool(enabled)
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return grad_mode(False)


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self.node: Optional[Node] = None

    # -- basic properties --------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def softmax(self):
        return softmax(self)

    def log_softmax(self):
        return log_softmax(self)

    def backward(self):
        backward(self)


def _raise_item(shape):
    raise ShapeError(f"item() needs a one-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def zeros(*shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def _result(kind: str, data: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    out = Tensor(data)
    if _state.grad_enabled and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        tape = _state.tape
        out.node = Node(tape, tape.record(kind, inputs, out, bwd))
    return out


# --------------------------------------------------------------------------
# elementwise binary ops with limited broadcasting
# --------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == len(sb) and len(sa) >= 1 and sa[:-1] == sb[:-1] and 1 in (sa[-1], sb[-1]):
        return
    raise ShapeError(f"{op}: cannot combine shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=DTYPE)
    return g.sum(axis=-1, keepdims=True).astype(DTYPE)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result("mul", ad * bd, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _result("div", ad / bd, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias, with x [B, in], weight [in, out], bias [out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply shapes {x.shape} and {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is None:
        return _result("linear", out, (x, weight), lambda g: (g @ wd.T, xd.T @ g))
    if bias.shape != (wd.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match output {wd.shape[1]}")
    return _result(
        "linear", out + bias.data, (x, weight, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0))
    )


# --------------------------------------------------------------------------
# unary ops
# --------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(DTYPE)
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result("square", x * x, (a,), lambda g: (2.0 * g * x,))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    if a.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    y = _softmax_np(a.data)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    if a.ndim == 0:
        raise ShapeError("log_softmax needs at least one axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bwd(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", y, (a,), bwd)


# --------------------------------------------------------------------------
# indexing and shape
# --------------------------------------------------------------------------


def _indices(idx: Tensor | np.ndarray, n: int, shape: tuple, what: str) -> np.ndarray:
    raw = idx.data if isinstance(idx, Tensor) else np.asarray(idx)
    if raw.shape != shape:
        raise ShapeError(f"{what}: index shape {raw.shape} does not match {shape}")
    out = np.rint(raw).astype(np.int64)
    bad = (out < 0) | (out >= n)
    if bad.any():
        raise IndexError(f"{what}: index {int(out[bad][0])} out of range for size {n}")
    return out


def gather(a: Tensor, index) -> Tensor:
    """Pick one entry per row along the last axis: out[...] = a[..., index[...]]."""
    if a.ndim == 0:
        raise ShapeError("gather needs at least one axis")
    idx = _indices(index, a.shape[-1], a.shape[:-1], "gather")
    taken = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _result("gather", taken, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from exc
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result("concat", data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty list")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result("stack", data, tensors, bwd)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = np.rint(index.data).astype(np.int64)
    data = np.array(a.data[index], dtype=DTYPE)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _result("getitem", data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    old = a.shape
    return _result("reshape", data, (a,), lambda g: (g.reshape(old),))


# --------------------------------------------------------------------------
# reductions and losses
# --------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    axis = _norm_axis(axis, a.ndim)
    shape = a.shape
    data = np.asarray(a.data.sum(axis=axis), dtype=DTYPE)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return _result("sum", data, (a,), bwd)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    shape = a.shape
    data = np.asarray(a.data.mean(axis=axis), dtype=DTYPE)
    inv = DTYPE(1.0 / n)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).astype(DTYPE),)

    return _result("mean", data, (a,), bwd)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; target may be a scalar."""
    target = as_tensor(target)
    if target.shape not in ((), pred.shape):
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = DTYPE(pred.size)
    tshape = target.shape

    def bwd(g):
        d = (2.0 / n) * g * diff
        return d, _unbroadcast(-d, tshape)

    return _result("mse_loss", np.asarray((diff * diff).mean(), dtype=DTYPE), (pred, target), bwd)


def cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Softmax cross entropy of logits [N, C] against class indices [N]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [N, C], got {logits.shape}")
    n, c = logits.shape
    idx = _indices(target, c, (n,), "cross_entropy")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    losses = (lse - z[np.arange(n), idx]).astype(DTYPE)
    p = _softmax_np(logits.data)
    p[np.arange(n), idx] -= 1.0
    if reduction == "none":
        return _result("cross_entropy", losses, (logits,), lambda g: (p * g[:, None],))
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    if n == 0:
        raise ShapeError("cross_entropy over an empty batch")
    return _result(
        "cross_entropy", np.asarray(losses.mean(), dtype=DTYPE), (logits,), lambda g: (p * (g / n),)
    )


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None or node.tape.closed:
        raise DetachedError("loss is not attached to a live tape")
    tape = node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    leaves: dict[int, list] = {}
    for rec in reversed(tape.records[: node.index + 1]):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.node is None:
                if key in leaves:
                    leaves[key][1] = leaves[key][1] + gi
                else:
                    leaves[key] = [inp, gi]
            elif inp.node.tape is tape:
                grads[key] = grads[key] + gi if key in grads else gi
            # inputs from a discarded tape act as constants
    for leaf, g in leaves.values():
        g = np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
        leaf.grad = Tensor(g.copy()) if leaf.grad is None else Tensor(leaf.grad.data + g)
    tape.closed = True
    tape.records.clear()
    if _state.tape is tape:
        _state.tape = Tape()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
