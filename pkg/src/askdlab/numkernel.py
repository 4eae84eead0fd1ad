"""Dense float64 kernels with tape-free reverse-mode differentiation.

Every primitive returns a new :class:`Tensor`. When any input requires a
gradient the output keeps a reference to a :class:`Node` describing how to
push the output gradient back to the inputs; :class:`Graph` linearises those
nodes into a topological order for :func:`backward`.

Shapes never broadcast implicitly. ``scale`` multiplies by a Python scalar;
everything else needs identical shapes, and :func:`broadcast` / :func:`reshape`
make expansion explicit. Reductions use numpy's pairwise summation along the
reduced axis, which is a fixed order for a given shape, so repeated runs are
bit-identical.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

PRIMITIVES = (
    "matmul", "add", "sub", "mul", "scale", "exp", "log", "reciprocal", "sqrt",
    "max-reduce", "sum-reduce", "mask-fill", "sigmoid", "concat", "slice",
    "transpose", "reshape", "broadcast",
)


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, teachers)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "output")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.output = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)  # always copy: tensors own their buffer
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar over the primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def _needs_grad(inputs: Sequence[Tensor]) -> bool:
    return grad_enabled() and any(t.requires_grad for t in inputs)


def _make(op: str, out: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    t = Tensor._wrap(out)
    if _needs_grad(inputs):
        t.requires_grad = True
        node = Node(op, inputs, backward_fn)
        node.output = t
        t.node = node
    return t


def _inputs(op: str, *xs) -> tuple:
    ts = tuple(as_tensor(x) for x in xs)
    for t in ts:
        _check_finite(t.data, f"input to {op}")
    return ts


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched product with equal leading dims."""
    a, b = _inputs("matmul", a, b)
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"matmul: incompatible ranks {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    return _make("matmul", A @ B, (a, b), bw)


def add(a, b) -> Tensor:
    a, b = _inputs("add", a, b)
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _inputs("sub", a, b)
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _inputs("mul", a, b)
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _make("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a, c: float) -> Tensor:
    (a,) = _inputs("scale", a)
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale: non-finite factor")
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    (a,) = _inputs("exp", a)
    out = np.exp(a.data)
    _check_finite(out, "exp output")
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    (a,) = _inputs("log", a)
    A = a.data
    if (A <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return _make("log", np.log(A), (a,), lambda g: (g / A,))


def reciprocal(a) -> Tensor:
    (a,) = _inputs("reciprocal", a)
    A = a.data
    if (A == 0).any():
        raise NonFiniteError("reciprocal: zero input")
    out = 1.0 / A
    return _make("reciprocal", out, (a,), lambda g: (-g * out * out,))


def sqrt(a) -> Tensor:
    (a,) = _inputs("sqrt", a)
    if (a.data <= 0).any():
        raise NonFiniteError("sqrt: non-positive input")
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    (a,) = _inputs("sigmoid", a)
    A = a.data
    # split by sign so exp never overflows
    out = np.empty_like(A)
    pos = A >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-A[pos]))
    e = np.exp(A[~pos])
    out[~pos] = e / (1.0 + e)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum_reduce(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    (a,) = _inputs("sum-reduce", a)
    shape = a.shape
    if axis is None:
        out = np.sum(a.data)

        def bw(g):
            return (np.full(shape, float(g)),)
    else:
        ax = _norm_axis(axis, a.data.ndim)
        out = np.sum(a.data, axis=ax, keepdims=keepdims)

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, shape).copy(),)

    return _make("sum-reduce", np.asarray(out, dtype=DTYPE), (a,), bw)


def max_reduce(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry only."""
    (a,) = _inputs("max-reduce", a)
    ax = _norm_axis(axis, a.data.ndim)
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, ax)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, ax), g, axis=ax)
        return (full,)

    return _make("max-reduce", out, (a,), bw)


def mask_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by the finite constant ``value``."""
    (a,) = _inputs("mask-fill", a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask-fill: mask shape {mask.shape} vs {a.shape}")
    if not np.isfinite(value):
        raise NonFiniteError("mask-fill: fill value must be finite")
    out = np.where(mask, value, a.data)
    keep = ~mask
    return _make("mask-fill", out, (a,), lambda g: (g * keep,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = _inputs("concat", *tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = _norm_axis(axis, ts[0].data.ndim)
    for t in ts[1:]:
        if t.data.ndim != ts[0].data.ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.data.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", out, ts, bw)


def slice_(a, index) -> Tensor:
    """Basic (view) indexing: ints and slices only."""
    (a,) = _inputs("slice", a)
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (int, slice, type(Ellipsis))):
            raise TypeError("slice: only int/slice/Ellipsis indices are supported")
    out = a.data[index].copy()
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make("slice", out, (a,), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    (a,) = _inputs("transpose", a)
    nd = a.data.ndim
    if axes is None:
        if nd < 2:
            raise ShapeError("transpose: needs rank >= 2")
        axes = list(range(nd - 2)) + [nd - 1, nd - 2]
    axes = tuple(axes)
    if sorted(axes) != list(range(nd)):
        raise ShapeError(f"transpose: bad permutation {axes} for rank {nd}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    (a,) = _inputs("reshape", a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def broadcast(a, shape: Sequence[int]) -> Tensor:
    """Explicit expansion of size-1 axes (or new leading axes) to ``shape``."""
    (a,) = _inputs("broadcast", a)
    shape = tuple(shape)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {old} to {shape}") from None
    lead = len(shape) - len(old)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(old) if n == 1 and shape[lead + i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make("broadcast", out, (a,), bw)


_DISPATCH = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "scale": scale,
    "exp": exp, "log": log, "reciprocal": reciprocal, "sqrt": sqrt,
    "max-reduce": max_reduce, "sum-reduce": sum_reduce, "mask-fill": mask_fill,
    "sigmoid": sigmoid, "concat": lambda *ts, axis=0: concat(ts, axis),
    "slice": slice_, "transpose": transpose, "reshape": reshape,
    "broadcast": broadcast,
}


def primitive_forward(op: str, *inputs, **attrs) -> Tensor:
    """Apply a primitive by name, e.g. ``primitive_forward("matmul", a, b)``."""
    try:
        fn = _DISPATCH[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}; expected one of {PRIMITIVES}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# graph + backward
# ---------------------------------------------------------------------------

class Graph:
    """Nodes reachable from ``root`` in topological (inputs-first) order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Node] = []
        seen: set[int] = set()
        if root.node is None:
            return
        # iterative post-order DFS; deep transformer graphs overflow recursion
        stack: list[tuple[Node, bool]] = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in reversed(node.inputs):
                if t.node is not None and id(t.node) not in seen:
                    stack.append((t.node, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        out, seen = [], set()
        for node in self.nodes:
            for t in node.inputs:
                if t.node is None and t.requires_grad and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def backward(root: Tensor, graph: Graph | None = None, wrt: Iterable[Tensor] = ()) -> Graph:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable leaf.

    Tensors listed in ``wrt`` get a zero gradient even when ``root`` does not
    depend on them.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    for t in wrt:
        if t.grad is None:
            t.grad = np.zeros(t.shape)
    if graph is None:
        graph = Graph(root)
    if root.node is None:
        if root.requires_grad:
            root.grad = (root.grad if root.grad is not None else 0.0) + np.ones(root.shape)
        return graph
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=DTYPE).reshape(t.shape)
            if t.node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    return graph


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences."""
    if not step > 0:
        raise ValueError("step must be positive")
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)

    def value(arr) -> float:
        with no_grad():
            return f(Tensor(arr)).item()

    if value(x0) != value(x0):
        raise ValueError("f is not deterministic")
    xt = Tensor(x0, requires_grad=True)
    backward(f(xt), wrt=[xt])
    analytic = xt.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        numeric.reshape(-1)[i] = (value(plus.reshape(x0.shape)) - value(minus.reshape(x0.shape))) / (2 * step)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """In-place ``p <- p - lr * grad(p)``, then clear the gradients."""
    if lr < 0 or not np.isfinite(lr):
        raise ValueError(f"learning rate must be finite and >= 0, got {lr}")
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or p.shape} has no gradient")
        _check_finite(p.grad, f"gradient of {p.name or p.shape}")
    for p in params:
        if lr:
            p.data -= lr * p.grad
        p.grad = None
