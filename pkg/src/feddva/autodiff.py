"""Reverse-mode automatic differentiation over dense float64 tensors.

Every operation returns a Tensor recording its parent tensors and a
closure for the local vector-Jacobian product. ``backward`` orders the
subgraph reachable from a scalar loss topologically and walks it in
reverse, accumulating gradients into requires-grad leaves. Gradients are
never overwritten: repeated backward calls add up until the caller
clears them (``sgd_step`` clears what it steps).

All arithmetic is float64 and single-threaded numpy, so identical seeds
give bitwise-identical forwards and gradients on one platform.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class DomainError(ValueError):
    """Operand values outside an op's mathematical domain (e.g. log of <= 0)."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph: non-scalar backward, missing gradients."""


class Tensor:
    """A dense float64 array plus an optional record of how it was computed.

    Leaves (no parents) may carry ``requires_grad``; op outputs inherit it
    from their parents. ``grad`` is populated by :func:`backward` on
    requires-grad leaves and accumulates across calls.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray, dict[int, np.ndarray]], None] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray, dict[int, np.ndarray]], None]) -> "Tensor":
        out = cls(data)
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A gradient-free leaf copy of this tensor's value."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; scalar operands become constant affine ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _sink(grads: dict[int, np.ndarray], parent: Tensor, value: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    key = id(parent)
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after all of its parents."""
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
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf with d(loss)/d(leaf).

    ``loss`` must be scalar. Propagation uses a transient gradient map, so
    calling backward twice on the same graph adds a second full
    contribution to the leaves (accumulation contract).
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        assert node._backward is not None
        node._backward(g, grads)


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """In-place p <- p - lr * grad for every param, then clear those grads."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise GraphError(f"sgd_step: parameter {i} (shape {p.shape}) has no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def back(g, grads):
        _sink(grads, a, g)
        _sink(grads, b, g)

    return Tensor._from_op(a.data + b.data, "add", (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def back(g, grads):
        _sink(grads, a, g)
        _sink(grads, b, -g)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul-elementwise: shapes {a.shape} and {b.shape} differ")

    def back(g, grads):
        _sink(grads, a, g * b.data)
        _sink(grads, b, g * a.data)

    return Tensor._from_op(a.data * b.data, "mul-elementwise", (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} do not conform")

    def back(g, grads):
        _sink(grads, a, g @ b.data.T)
        _sink(grads, b, a.data.T @ g)

    return Tensor._from_op(a.data @ b.data, "matmul", (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got shape {a.shape}")

    def back(g, grads):
        _sink(grads, a, g.T)

    return Tensor._from_op(a.data.T.copy(), "transpose", (a,), back)


def scale(a: Tensor, s: float) -> Tensor:
    def back(g, grads):
        _sink(grads, a, g * s)

    return Tensor._from_op(a.data * s, "scale", (a,), back)


def shift(a: Tensor, s: float) -> Tensor:
    def back(g, grads):
        _sink(grads, a, g)

    return Tensor._from_op(a.data + s, "shift", (a,), back)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g, grads):
        _sink(grads, a, g * mask)

    return Tensor._from_op(np.where(mask, a.data, 0.0), "relu", (a,), back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def back(g, grads):
        _sink(grads, a, g * (1.0 - y * y))

    return Tensor._from_op(y, "tanh", (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    y[~pos] = ex / (1.0 + ex)

    def back(g, grads):
        _sink(grads, a, g * y * (1.0 - y))

    return Tensor._from_op(y, "sigmoid", (a,), back)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def back(g, grads):
        _sink(grads, a, g * y)

    return Tensor._from_op(y, "exp", (a,), back)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError(f"log: input has non-positive entries (min={a.data.min()!r}); "
                          "callers must pre-shift")

    def back(g, grads):
        _sink(grads, a, g / a.data)

    return Tensor._from_op(np.log(a.data), "log", (a,), back)


def square(a: Tensor) -> Tensor:
    def back(g, grads):
        _sink(grads, a, g * 2.0 * a.data)

    return Tensor._from_op(a.data * a.data, "square", (a,), back)


def sum_all(a: Tensor) -> Tensor:
    def back(g, grads):
        _sink(grads, a, np.full_like(a.data, float(g)))

    return Tensor._from_op(np.asarray(a.data.sum()), "sum", (a,), back)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g, grads):
        _sink(grads, a, np.full_like(a.data, float(g) / n))

    return Tensor._from_op(np.asarray(a.data.mean()), "mean", (a,), back)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat-last-axis: shapes {a.shape} and {b.shape} "
                         "must be 2-d with equal row counts")
    split = a.shape[1]

    def back(g, grads):
        _sink(grads, a, g[:, :split])
        _sink(grads, b, g[:, split:])

    return Tensor._from_op(np.concatenate([a.data, b.data], axis=1),
                           "concat-last-axis", (a, b), back)


def add_rowvec(x: Tensor, row: Tensor) -> Tensor:
    """x + row with row broadcast over the rows of x (bias add)."""
    if x.data.ndim != 2:
        raise ShapeError(f"broadcast-add-row: left operand must be 2-d, got {x.shape}")
    r = row.data.reshape(-1)
    if row.data.ndim > 2 or r.shape[0] != x.shape[1]:
        raise ShapeError(f"broadcast-add-row: row shape {row.shape} does not match "
                         f"columns of {x.shape}")

    def back(g, grads):
        _sink(grads, x, g)
        _sink(grads, row, g.sum(axis=0).reshape(row.shape))

    return Tensor._from_op(x.data + r[None, :], "broadcast-add-row", (x, row), back)


# one entry per op kind, for dispatch-style callers (selftest, grad sweeps)
OP_TABLE: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul-elementwise": mul,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "square": square,
    "sum": sum_all,
    "mean": mean_all,
    "concat-last-axis": concat_last,
    "broadcast-add-row": add_rowvec,
    "transpose": transpose,
}


def forward_op(kind: str, *inputs: Tensor) -> Tensor:
    try:
        fn = OP_TABLE[kind]
    except KeyError:
        raise ValueError(f"forward_op: unknown op kind {kind!r}") from None
    return fn(*inputs)
