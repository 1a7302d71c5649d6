"""Dense tensors with reverse-mode automatic differentiation.

Values live in contiguous row-major numpy arrays (float32 for training,
float64 for gradient-check work; one precision per run). Every operation
that sees a ``requires_grad`` input records a graph node holding its parent
tensors and a closure mapping the output gradient to per-parent gradients.
``backward`` walks the graph once in reverse topological order and
accumulates (+=) into ``grad`` buffers, so callers must zero grads between
passes.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True

# Test hook: names of deliberately broken behaviours, used by the selftest
# harness to prove that a gradient fault is detected and named.
_injected_faults: set[str] = set()


@contextmanager
def no_grad():
    """Disable graph recording inside the context (forward-only passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-dimensional array that may participate in a backward graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self._op = ""

    # -- construction helpers --

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- introspection --

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

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- grad management --

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(
            f"mixed precisions in one op: {sorted(str(d) for d in dtypes)}; "
            "a run uses a single precision throughout"
        )


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# Each op's backward closure takes the upstream gradient and returns one
# gradient array (or None) per parent, in parent order.

# -- elementwise arithmetic --


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    data = a.data ** e

    def bwd(g):
        return (g * e * a.data ** (e - 1.0),)

    return _make(data, (a,), bwd, "pow")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,), "sqrt")


def relu(a: Tensor) -> Tensor:
    # Subgradient at exactly 0 is defined as 0.
    mask = a.data > 0
    data = np.where(mask, a.data, 0).astype(a.data.dtype, copy=False)

    def bwd(g):
        if "relu_grad" in _injected_faults:
            return (g * ~mask,)
        return (g * mask,)

    return _make(data, (a,), bwd, "relu")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow for large |x|."""
    x = a.data
    data = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype, copy=False)

    def bwd(g):
        return (g / (1.0 + np.exp(-x)),)

    return _make(data, (a,), bwd, "softplus")


# -- shape manipulation --


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)  # view when layout allows; element count must match
    return _make(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    _check_same_dtype(*tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ShapeError(f"concat rank mismatch: {ref} vs {t.shape}")
        for ax, (da, db) in enumerate(zip(ref, t.shape)):
            if ax != (axis % len(ref)) and da != db:
                raise ShapeError(
                    f"concat along axis {axis}: dim {ax} differs ({da} vs {db})"
                )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tensors, bwd, "concat")


def index_select(a: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, idx, axis=axis)

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (slice(None),) * axis + (idx,), g)
        return (acc,)

    return _make(data, (a,), bwd, "index_select")


# -- reductions --


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), bwd, "sum")


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(data, (a,), bwd, "mean")


def variance(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Biased variance, composed from primitives so it stays differentiable."""
    mu = mean_(a, axis=axis, keepdims=True)
    centered = sub(a, mu)
    return mean_(mul(centered, centered), axis=axis, keepdims=keepdims)


# -- linear algebra and softmax --


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul inner dims differ: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} vs {b.shape[-2 if b.ndim > 1 else 0]})"
        )
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), bwd, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    # Max subtraction keeps exp() in range at 32-bit.
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _make(data, (a,), bwd, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), bwd, "log_softmax")


# -- backward pass --


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the DAG (stacked-block graphs are deeper
    than the interpreter recursion limit)."""
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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every requires_grad tensor
    reachable from ``root``.

    ``root`` must be a scalar (single-element tensor). Fan-out sums the
    per-path chain-rule contributions; grads add onto existing buffers, so
    call ``zero_grads`` between independent passes.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in flow:
                flow[id(parent)] += pg
            else:
                # Own the buffer: closures may return views of shared arrays.
                flow[id(parent)] = np.array(pg, copy=True)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# -- generic primitive dispatch --


def forward_primitive(op_kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Apply a named primitive; the generic substrate entry point.

    Raises ShapeError (naming the offending dimensions) when inputs do not
    fit ``op_kind``; records a graph node whenever any input requires grad.
    """
    attrs = dict(attrs or {})
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise KeyError(f"unknown primitive {op_kind!r}") from None
    return fn(inputs, attrs)


_PRIMITIVES: dict[str, Callable] = {
    "add": lambda ins, at: add(*ins),
    "sub": lambda ins, at: sub(*ins),
    "mul": lambda ins, at: mul(*ins),
    "div": lambda ins, at: div(*ins),
    "matmul": lambda ins, at: matmul(*ins),
    "relu": lambda ins, at: relu(ins[0]),
    "exp": lambda ins, at: exp(ins[0]),
    "log": lambda ins, at: log(ins[0]),
    "sqrt": lambda ins, at: sqrt(ins[0]),
    "reshape": lambda ins, at: reshape(ins[0], tuple(at["shape"])),
    "transpose": lambda ins, at: transpose(ins[0], tuple(at["axes"])),
    "broadcast": lambda ins, at: broadcast_to(ins[0], tuple(at["shape"])),
    "concat": lambda ins, at: concat(ins, at["axis"]),
    "softmax": lambda ins, at: softmax(ins[0], at.get("axis", -1)),
    "log_softmax": lambda ins, at: log_softmax(ins[0], at.get("axis", -1)),
    "sum": lambda ins, at: sum_(ins[0], at.get("axis"), at.get("keepdims", False)),
    "mean": lambda ins, at: mean_(ins[0], at.get("axis"), at.get("keepdims", False)),
    "variance": lambda ins, at: variance(ins[0], at.get("axis"), at.get("keepdims", False)),
    "index_select": lambda ins, at: index_select(ins[0], at["indices"], at.get("axis", 0)),
}


def assert_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
