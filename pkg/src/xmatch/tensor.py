"""Dense tensors with reverse-mode automatic differentiation on top of numpy.

Every op builds a node holding its parents and a closure that maps the output
gradient to parent gradients. ``Tensor.backward`` orders the graph
topologically (the tape) and replays the closures in reverse.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NormalizationError, NumericalError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            if not np.all(np.isfinite(self.data)):
                raise NumericalError("backward() on a non-finite loss")
            grad = np.ones_like(self.data)
        tape = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _not_scalar(shape):
    raise ContractError(f"item() on a tensor of shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each after all of its parents.

    Iterative DFS so deep networks do not hit the recursion limit.
    """
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
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _coerce(a, b):
    """Wrap python scalars in tensors of the other operand's dtype."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return make_node(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return make_node(ad / bd, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return make_node(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return make_node(np.log(x), (a,), lambda g: (g / x,), "log")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return make_node(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return make_node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return make_node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_node(out, tensors, backward, "concat")


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """out[i] = a[i, index[i]] for a matrix ``a``."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"take_rows: matrix {a.shape} with index {index.shape}")
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, index] = g
        return (out,)

    return make_node(a.data[rows, index], (a,), backward, "take_rows")


# -- normalizing maps --------------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), backward, "log_softmax")


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    scale = np.abs(x).max(axis=axis, keepdims=True)
    if np.any(scale == 0):
        raise NormalizationError("l2_normalize: zero-norm vector")
    # rescale first so tiny or huge rows do not under/overflow when squared
    y = x / scale
    norm = scale * np.sqrt((y * y).sum(axis=axis, keepdims=True))
    out = y / (norm / scale)

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_node(out, (a,), backward, "l2_normalize")
