"""Rank-4 tensor type with explicit-graph reverse-mode differentiation.

Every value in the library is a dense (batch, channel, height, width) array
of float64. Operations are pure functions; when a Graph is passed they append
a node holding the saved inputs and a backward closure, otherwise they run in
inference mode and record nothing.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Backward-pass contract violation (e.g. non-scalar seed)."""


class Tensor:
    """Dense (n, c, h, w) float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank-4 (n, c, h, w), got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class Node:
    """One executed operation: the produced tensor, its inputs, and a closure
    mapping the output gradient to per-input gradients (None for constants)."""

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Graph:
    """Topologically ordered record of executed operations.

    Forward calls append in execution order, so the node list is already a
    valid topological order and backward() can walk it once, in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, out: Tensor, inputs, backward_fn):
        self.nodes.append(Node(out, tuple(inputs), backward_fn))


def tracing(graph, inputs) -> bool:
    return graph is not None and any(t.requires_grad for t in inputs)


def backward(graph: Graph, loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) into .grad of every requires_grad leaf.

    Visits each node exactly once in reverse topological order; gradients
    accumulate additively where a tensor feeds multiple consumers. Calling
    twice without zero_grad doubles the stored gradients.
    """
    if loss.data.shape != (1, 1, 1, 1):
        raise GraphError(f"backward seed must be a scalar tensor, got shape {loss.data.shape}")
    acc = {id(loss): np.ones((1, 1, 1, 1))}
    live = {id(loss): loss}
    for node in reversed(graph.nodes):
        g = acc.pop(id(node.out), None)
        if g is None:
            continue
        live.pop(id(node.out), None)
        grads = node.backward_fn(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            prev = acc.get(id(t))
            acc[id(t)] = gt if prev is None else prev + gt
            live[id(t)] = t
    # whatever is left was never produced inside this graph: the leaves
    for tid, g in acc.items():
        live[tid].accumulate_grad(g)


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor, graph=None) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    if tracing(graph, (a, b)):
        out.requires_grad = True
        graph.record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor, graph=None) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    if tracing(graph, (a, b)):
        out.requires_grad = True
        graph.record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor, graph=None) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    if tracing(graph, (a, b)):
        out.requires_grad = True
        ad, bd = a.data, b.data
        graph.record(out, (a, b), lambda g: (g * bd, g * ad))
    return out


def relu(x: Tensor, graph=None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if tracing(graph, (x,)):
        out.requires_grad = True
        mask = x.data > 0.0
        graph.record(out, (x,), lambda g: (g * mask,))
    return out


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """1 / (1 + exp(-z)) without overflow for large |z|."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor, graph=None) -> Tensor:
    y = stable_sigmoid(x.data)
    out = Tensor(y)
    if tracing(graph, (x,)):
        out.requires_grad = True
        graph.record(out, (x,), lambda g: (g * y * (1.0 - y),))
    return out


def one_minus(x: Tensor, graph=None) -> Tensor:
    out = Tensor(1.0 - x.data)
    if tracing(graph, (x,)):
        out.requires_grad = True
        graph.record(out, (x,), lambda g: (-g,))
    return out


def scale(x: Tensor, alpha: float, graph=None) -> Tensor:
    out = Tensor(x.data * alpha)
    if tracing(graph, (x,)):
        out.requires_grad = True
        graph.record(out, (x,), lambda g: (g * alpha,))
    return out


def concat_channels(parts, graph=None) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_channels: need at least one operand")
    n, _, h, w = parts[0].data.shape
    for p in parts[1:]:
        pn, _, ph, pw = p.data.shape
        if (pn, ph, pw) != (n, h, w):
            raise ShapeError(
                f"concat_channels: operand shape {p.data.shape} incompatible with {parts[0].data.shape}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    if tracing(graph, parts):
        out.requires_grad = True
        sizes = [p.data.shape[1] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            return tuple(np.split(g, splits, axis=1))

        graph.record(out, parts, bwd)
    return out


def repeat_channels(x: Tensor, channels: int, graph=None) -> Tensor:
    """Broadcast a single-channel map across `channels` channels."""
    if x.data.shape[1] != 1:
        raise ShapeError(f"repeat_channels: input must have 1 channel, got {x.data.shape[1]}")
    out = Tensor(np.repeat(x.data, channels, axis=1))
    if tracing(graph, (x,)):
        out.requires_grad = True
        graph.record(out, (x,), lambda g: (g.sum(axis=1, keepdims=True),))
    return out


def sum_all(x: Tensor, graph=None) -> Tensor:
    out = Tensor(np.full((1, 1, 1, 1), x.data.sum()))
    if tracing(graph, (x,)):
        out.requires_grad = True
        shape = x.data.shape
        graph.record(out, (x,), lambda g: (np.full(shape, g[0, 0, 0, 0]),))
    return out


def mean_all(x: Tensor, graph=None) -> Tensor:
    return scale(sum_all(x, graph), 1.0 / x.data.size, graph)
