"""Dense tensors with a reverse-mode gradient tape.

Every op records a closure that maps the output gradient to gradients for its
parents.  ``Tensor.backward`` walks the tape in reverse topological order and
accumulates into ``.grad`` of leaf tensors that require gradients.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with an op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, consumed graph, ...)."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """N-dimensional float array that can take part in the gradient tape."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced NaN or Inf")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- tape ---------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already called on this graph; recompute the loss first")
        if self._backward is None:
            raise GraphError("no recorded computation leads to this tensor")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._consumed:
                raise GraphError("graph shares nodes with one that was already back-propagated")
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._consumed = True
                node._backward = None
                node._parents = ()

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf tensor with a dotted name such as ``fusion.align1.weight``."""

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._from_op(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_same_shape(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return Tensor._from_op(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a single-element scalar."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_same_shape(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), backward, "relu")


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def backward(g):
        return (2.0 * x.data * g,)

    return Tensor._from_op(out, (x,), backward, "square")


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(out, (x,), backward, "sum")


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        n = x.size
        out = np.asarray(x.data.mean(), dtype=x.dtype)

        def backward(g):
            return (np.full(x.shape, g / n, dtype=x.dtype),)

    else:
        n = x.shape[axis]
        out = x.data.mean(axis=axis)

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return Tensor._from_op(out, (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward, "reshape")


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], dtype=x.dtype)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "getitem")


def stack(tensors: Iterable[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: empty sequence")
    shape = ts[0].shape
    for t in ts:
        if t.shape != shape:
            raise ShapeError(f"stack: shape {t.shape} != {shape}")
    out = np.stack([t.data for t in ts])

    def backward(g):
        return tuple(g[i] for i in range(len(ts)))

    return Tensor._from_op(out, ts, backward, "stack")


# -- raw dump format --------------------------------------------------------------


def save_tensor(path, x) -> None:
    """Write rank, extents (u64 LE) and float64 LE payload."""
    arr = np.ascontiguousarray(x.data if isinstance(x, Tensor) else x, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    (rank,) = struct.unpack_from("<Q", raw, 0)
    shape = struct.unpack_from(f"<{rank}Q", raw, 8)
    offset = 8 + 8 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(raw) - offset != 8 * n:
        raise ShapeError(f"{path}: payload holds {(len(raw) - offset) // 8} values, header says {n}")
    arr = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape)
    return Tensor(arr.astype(np.float64))
