"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The graph is a dynamically built tape of ``Tensor`` nodes. Each operation
records its parents and a closure implementing the exact vector-Jacobian
product; ``backward`` walks the tape in reverse topological order and
accumulates gradients, so a node consumed several times receives the sum of
all its consumers' contributions.

Graphs are built per batch and discarded after the optimizer step. Everything
is float64; there is no broadcasting magic beyond what ``add``/``mul`` state.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes do not conform to an operation's arity rules."""

    def __init__(self, op: str, *shapes):
        detail = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")


class Tensor:
    """A node of the computation graph: a value plus backward plumbing.

    ``grad`` holds d(root)/d(self) after ``backward`` has run from a scalar
    root that reaches this node; nodes the backward pass never visits read a
    zero gradient. Leaves marked ``needs_grad=False`` (constants: data
    batches, noise) are pruned from the backward pass entirely, as is any
    node none of whose ancestors needs gradients.
    """

    __slots__ = ("data", "_grad", "parents", "_backward", "needs_grad")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None,
                 needs_grad: bool | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.parents = parents
        self._backward = backward
        if needs_grad is None:
            needs_grad = True if not parents else any(p.needs_grad for p in parents)
        self.needs_grad = needs_grad

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad.any() else 'zero'})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), needs_grad=False)


def constant(x) -> Tensor:
    """A leaf excluded from gradient computation (inputs, noise, labels)."""
    return Tensor(x, needs_grad=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    """Elementwise sum; numpy broadcasting between the operands is allowed."""
    a, b = _lift(a), _lift(b)
    try:
        value = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None
    out = Tensor(value, (a, b))

    def _bwd(g):
        if a.needs_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.needs_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    out._backward = _bwd
    return out


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    try:
        value = a.data * b.data
    except ValueError:
        raise ShapeMismatch("elementwise-mul", a.shape, b.shape) from None
    out = Tensor(value, (a, b))

    def _bwd(g):
        if a.needs_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.needs_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    out._backward = _bwd
    return out


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data, (a, b))

    def _bwd(g):
        if a.needs_grad:
            a.grad += g @ b.data.T
        if b.needs_grad:
            b.grad += a.data.T @ g

    out._backward = _bwd
    return out


def transpose(a) -> Tensor:
    """2-D transpose. Convenience primitive for (out, in)-stored weights."""
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose", a.shape)
    out = Tensor(a.data.T, (a,))

    def _bwd(g):
        if a.needs_grad:
            a.grad += g.T

    out._backward = _bwd
    return out


def tanh(a) -> Tensor:
    a = _lift(a)
    value = np.tanh(a.data)
    out = Tensor(value, (a,))

    def _bwd(g):
        if a.needs_grad:
            a.grad += g * (1.0 - value * value)

    out._backward = _bwd
    return out


def log(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.log(a.data), (a,))

    def _bwd(g):
        if a.needs_grad:
            a.grad += g / a.data

    out._backward = _bwd
    return out


def exp(a) -> Tensor:
    a = _lift(a)
    value = np.exp(a.data)
    out = Tensor(value, (a,))

    def _bwd(g):
        if a.needs_grad:
            a.grad += g * value

    out._backward = _bwd
    return out


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over all entries (axis=None) or one axis."""
    a = _lift(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def _bwd(g):
        if not a.needs_grad:
            return
        if axis is None:
            a.grad += g  # scalar broadcasts everywhere
        elif keepdims:
            a.grad += g
        else:
            a.grad += np.expand_dims(g, axis)

    out._backward = _bwd
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    ranks = {p.data.ndim for p in parts}
    if len(ranks) != 1:
        raise ShapeMismatch("concat", *[p.shape for p in parts])
    try:
        value = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *[p.shape for p in parts]) from None
    out = Tensor(value, tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.needs_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                p.grad += g[tuple(index)]

    out._backward = _bwd
    return out


def select_rows(a, indices) -> Tensor:
    """Gather rows of a 2-D array by integer index (embedding-style lookup)."""
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeMismatch("row-select", a.shape)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row-select: index out of range for {a.data.shape[0]} rows")
    out = Tensor(a.data[idx], (a,))

    def _bwd(g):
        if a.needs_grad:
            np.add.at(a.grad, idx, g)

    out._backward = _bwd
    return out


def softmax(a) -> Tensor:
    """Softmax over the last axis, with the usual max-subtraction guard."""
    a = _lift(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    value = ez / ez.sum(axis=-1, keepdims=True)
    out = Tensor(value, (a,))

    def _bwd(g):
        if a.needs_grad:
            a.grad += (g - (g * value).sum(axis=-1, keepdims=True)) * value

    out._backward = _bwd
    return out


# Named forward operations, as one dispatchable table.
OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "elementwise-mul": mul,
    "tanh": tanh,
    "concat": concat,
    "row-select": select_rows,
    "log": log,
    "exp": exp,
    "sum": tensor_sum,
    "softmax-over-last-axis": softmax,
    "transpose": transpose,
}


def apply_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a forward operation by name; see ``OPS`` for the vocabulary."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **kwargs)


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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` of every gradient-carrying node reachable from a
    scalar ``root``.

    Gradients of visited nodes are reset before accumulation, so parameters
    reused across many graphs always read the current graph's gradient.
    Subgraphs whose leaves are all constants are skipped.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.data.shape}")
    order = _topological_order(root)
    for node in order:
        if node.needs_grad:
            node._grad = np.zeros_like(node.data)
    root._grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.needs_grad and node._backward is not None:
            node._backward(node._grad)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must rebuild and return the scalar loss from the current parameter
    values, with any noise pre-sampled and frozen: a non-deterministic ``f``
    is rejected. Returns the max over every parameter entry of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    probe_a, probe_b = f(), f()
    if not np.array_equal(probe_a.data, probe_b.data):
        raise ValueError("grad_check requires a deterministic builder; fix all noise inputs")
    backward(probe_a)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + epsilon
            up = f().item()
            flat[i] = saved - epsilon
            down = f().item()
            flat[i] = saved
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(ana_flat[i] - numeric) / max(1e-8, abs(ana_flat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
