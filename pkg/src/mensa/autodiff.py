"""Tape-based reverse-mode differentiation over fp64 arrays.

A :class:`Graph` records every operation in creation order, which is also a
valid topological order. Node values are numpy arrays (a scalar is a 0-d
array). Element-wise binary ops follow numpy broadcasting; their gradients are
summed back to the operand shape.

    g = Graph()
    x = g.leaf("x", 3.0)
    y = g.leaf("y", 5.0)
    loss = x * y
    backward(g, loss)["x"]  # -> 5.0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946


class DomainError(ValueError):
    """Raised when an operation receives an argument outside its domain."""

    def __init__(self, op: str, node: int, detail: str = "non-positive argument"):
        super().__init__(f"{op} at node {node}: {detail}")
        self.op = op
        self.node = node


class ContractError(ValueError):
    """Raised when a caller violates an API contract (shapes, scalar loss, ...)."""


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    value: np.ndarray | None = None
    name: str | None = None
    requires_grad: bool = False


class Var:
    """Handle to a node; supports arithmetic operators."""

    __slots__ = ("graph", "index")
    __array_ufunc__ = None

    def __init__(self, graph: Graph, index: int):
        self.graph = graph
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        node = self.graph.nodes[self.index]
        return f"Var({node.op}#{self.index}, shape={self.shape})"

    def _lift(self, other) -> Var:
        if isinstance(other, Var):
            return other
        return self.graph.const(other)

    def __add__(self, other):
        return self.graph.apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.graph.apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.graph.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.apply("mul", self._lift(other), self)

    def __truediv__(self, other):
        return self.graph.apply("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return self.graph.apply("div", self._lift(other), self)

    def __neg__(self):
        return self.graph.apply("neg", self)

    def __pow__(self, exponent: float):
        return power(self, exponent)


# ---------------------------------------------------------------------------
# primitive registry: tag -> (forward, vjp)
# forward(node_index, input values, attrs) -> value
# vjp(upstream grad, input values, output value, attrs) -> grads per input


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _fwd_log(i, xs, attrs):
    (x,) = xs
    if np.any(x <= 0.0):
        raise DomainError("log", i)
    return np.log(x)


def _fwd_power(i, xs, attrs):
    (x,) = xs
    p = attrs["exponent"]
    if float(p).is_integer():
        return np.power(x, p)
    if np.any(x <= 0.0):
        raise DomainError("power", i)
    return np.power(x, p)


def _fwd_logsumexp(i, xs, attrs):
    (x,) = xs
    axis = attrs["axis"]
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _softmax(x, axis):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _vjp_logsumexp(g, xs, out, attrs):
    (x,) = xs
    axis = attrs["axis"]
    w = np.exp(x - np.expand_dims(out, axis))
    return (np.expand_dims(g, axis) * w,)


def _vjp_softmax(g, xs, out, attrs):
    axis = attrs["axis"]
    inner = np.sum(g * out, axis=axis, keepdims=True)
    return (out * (g - inner),)


def _fwd_affine(i, xs, attrs):
    x, w = xs[0], xs[1]
    if x.shape[-1] != w.shape[1]:
        raise ContractError(f"affine at node {i}: input width {x.shape[-1]} != weight fan-in {w.shape[1]}")
    out = x @ w.T
    if len(xs) == 3:
        out = out + xs[2]
    return out


def _vjp_affine(g, xs, out, attrs):
    x, w = xs[0], xs[1]
    gx = g @ w
    gw = (g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1]))
    grads = [gx, gw]
    if len(xs) == 3:
        grads.append(_unbroadcast(g, xs[2].shape))
    return tuple(grads)


def _selu(x):
    return SELU_SCALE * np.where(x > 0.0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def _selu_grad(x):
    return SELU_SCALE * np.where(x > 0.0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def _fwd_sum(i, xs, attrs):
    return np.asarray(np.sum(xs[0], axis=attrs["axis"]))


def _vjp_sum(g, xs, out, attrs):
    (x,) = xs
    axis = attrs["axis"]
    if axis is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _vjp_take(g, xs, out, attrs):
    (x,) = xs
    grad = np.zeros_like(x)
    idx = [slice(None)] * x.ndim
    idx[attrs["axis"]] = attrs["index"]
    grad[tuple(idx)] = g
    return (grad,)


def _take(x, attrs):
    idx = [slice(None)] * x.ndim
    idx[attrs["axis"]] = attrs["index"]
    return x[tuple(idx)]


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (
        lambda i, xs, a: xs[0] + xs[1],
        lambda g, xs, o, a: (_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)),
    ),
    "sub": (
        lambda i, xs, a: xs[0] - xs[1],
        lambda g, xs, o, a: (_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)),
    ),
    "mul": (
        lambda i, xs, a: xs[0] * xs[1],
        lambda g, xs, o, a: (_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)),
    ),
    "div": (
        lambda i, xs, a: xs[0] / xs[1],
        lambda g, xs, o, a: (
            _unbroadcast(g / xs[1], xs[0].shape),
            _unbroadcast(-g * xs[0] / (xs[1] * xs[1]), xs[1].shape),
        ),
    ),
    "neg": (lambda i, xs, a: -xs[0], lambda g, xs, o, a: (-g,)),
    "exp": (lambda i, xs, a: np.exp(xs[0]), lambda g, xs, o, a: (g * o,)),
    "log": (_fwd_log, lambda g, xs, o, a: (g / xs[0],)),
    "power": (
        _fwd_power,
        lambda g, xs, o, a: (g * a["exponent"] * np.power(xs[0], a["exponent"] - 1.0),),
    ),
    "minimum": (
        lambda i, xs, a: np.minimum(xs[0], a["bound"]),
        lambda g, xs, o, a: (g * (xs[0] < a["bound"]),),
    ),
    "relu6": (
        lambda i, xs, a: np.clip(xs[0], 0.0, 6.0),
        lambda g, xs, o, a: (g * ((xs[0] > 0.0) & (xs[0] < 6.0)),),
    ),
    "selu": (lambda i, xs, a: _selu(xs[0]), lambda g, xs, o, a: (g * _selu_grad(xs[0]),)),
    "logsumexp": (_fwd_logsumexp, _vjp_logsumexp),
    "softmax": (lambda i, xs, a: _softmax(xs[0], a["axis"]), _vjp_softmax),
    "affine": (_fwd_affine, _vjp_affine),
    "sum": (_fwd_sum, _vjp_sum),
    "reshape": (
        lambda i, xs, a: xs[0].reshape(a["shape"]),
        lambda g, xs, o, a: (g.reshape(xs[0].shape),),
    ),
    "take": (lambda i, xs, a: _take(xs[0], a), _vjp_take),
    "dropout": (
        lambda i, xs, a: xs[0] * a["mask"],
        lambda g, xs, o, a: (g * a["mask"],),
    ),
}


class Graph:
    """Recorded computation. Nodes are appended in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, name: str, value) -> Var:
        if name in self.leaves:
            raise ContractError(f"duplicate leaf name {name!r}")
        node = Node("leaf", (), value=_as_f64(value), name=name, requires_grad=True)
        self.nodes.append(node)
        self.leaves[name] = len(self.nodes) - 1
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> Var:
        self.nodes.append(Node("const", (), value=_as_f64(value)))
        return Var(self, len(self.nodes) - 1)

    def apply(self, op: str, *inputs: Var, **attrs) -> Var:
        for v in inputs:
            if v.graph is not self:
                raise ContractError("operand belongs to a different graph")
        index = len(self.nodes)
        forward, _ = PRIMITIVES[op]
        value = forward(index, [v.value for v in inputs], attrs)
        node = Node(
            op,
            tuple(v.index for v in inputs),
            attrs,
            np.asarray(value, dtype=np.float64),
            requires_grad=any(self.nodes[v.index].requires_grad for v in inputs),
        )
        self.nodes.append(node)
        return Var(self, index)

    def var(self, index: int) -> Var:
        return Var(self, index)


def _as_f64(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if np.any(np.isnan(arr)):
        raise ContractError("NaN input value")
    return arr


def forward_eval(graph: Graph, leaf_values: dict[str, Any] | None = None) -> list[np.ndarray]:
    """Re-run every node in order, optionally rebinding leaves by name.

    Returns the list of node values. Raises :class:`DomainError` naming the node
    when a log/power receives a non-positive argument.
    """
    leaf_values = leaf_values or {}
    unknown = set(leaf_values) - set(graph.leaves)
    if unknown:
        raise ContractError(f"unknown leaves: {sorted(unknown)}")
    for name, value in leaf_values.items():
        node = graph.nodes[graph.leaves[name]]
        new = _as_f64(value)
        if new.shape != node.value.shape:
            raise ContractError(f"leaf {name!r}: shape {new.shape} != {node.value.shape}")
        node.value = new
    for i, node in enumerate(graph.nodes):
        if node.op in ("leaf", "const"):
            continue
        forward, _ = PRIMITIVES[node.op]
        xs = [graph.nodes[j].value for j in node.inputs]
        node.value = np.asarray(forward(i, xs, node.attrs), dtype=np.float64)
    return [node.value for node in graph.nodes]


def backward(graph: Graph, loss: Var) -> dict[str, np.ndarray]:
    """Gradient of a scalar node with respect to every named leaf."""
    if loss.graph is not graph:
        raise ContractError("loss node belongs to a different graph")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.value)
    nodes = graph.nodes
    for i in range(loss.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or not node.inputs:
            continue
        _, vjp = PRIMITIVES[node.op]
        xs = [nodes[j].value for j in node.inputs]
        for j, gj in zip(node.inputs, vjp(g, xs, node.value, node.attrs)):
            if not nodes[j].requires_grad:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
    out = {}
    for name, idx in graph.leaves.items():
        g = grads[idx] if idx < len(grads) else None
        out[name] = np.zeros_like(nodes[idx].value) if g is None else np.asarray(g, dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# functional helpers


def exp(x: Var) -> Var:
    return x.graph.apply("exp", x)


def log(x: Var) -> Var:
    return x.graph.apply("log", x)


def power(x: Var, exponent: float) -> Var:
    return x.graph.apply("power", x, exponent=float(exponent))


def minimum(x: Var, bound: float) -> Var:
    """Element-wise ``min(x, bound)``; the gradient is zero where clipped."""
    return x.graph.apply("minimum", x, bound=float(bound))


def relu6(x: Var) -> Var:
    return x.graph.apply("relu6", x)


def selu(x: Var) -> Var:
    return x.graph.apply("selu", x)


def logsumexp(x: Var, axis: int = -1) -> Var:
    return x.graph.apply("logsumexp", x, axis=axis)


def softmax(x: Var, axis: int = -1) -> Var:
    return x.graph.apply("softmax", x, axis=axis)


def log_softmax(x: Var, axis: int = -1) -> Var:
    lse = logsumexp(x, axis=axis)
    return x - reshape(lse, _keepdims_shape(x.shape, axis))


def affine(x: Var, weight: Var, bias: Var | None = None) -> Var:
    """``x @ weight.T + bias`` for a vector or a batch of row vectors."""
    if bias is None:
        return x.graph.apply("affine", x, weight)
    return x.graph.apply("affine", x, weight, bias)


def sum(x: Var, axis: int | None = None) -> Var:  # noqa: A001 - mirrors numpy
    return x.graph.apply("sum", x, axis=axis)


def reshape(x: Var, shape: tuple[int, ...]) -> Var:
    return x.graph.apply("reshape", x, shape=tuple(shape))


def take(x: Var, index: int, axis: int = -1) -> Var:
    return x.graph.apply("take", x, index=int(index), axis=axis)


def dropout(x: Var, rate: float, rng: np.random.Generator | None) -> Var:
    """Inverted dropout. Identity when ``rate == 0`` or ``rng`` is None (evaluation)."""
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise ContractError("dropout rate must be < 1")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x.graph.apply("dropout", x, mask=mask)


def _keepdims_shape(shape, axis):
    axis = axis % len(shape)
    return tuple(1 if k == axis else n for k, n in enumerate(shape))


def scalar_value(x: Var) -> float:
    v = x.value
    if v.size != 1:
        raise ContractError(f"expected scalar, got shape {v.shape}")
    return float(v.reshape(()))


def is_finite(x: Var) -> bool:
    return bool(np.all(np.isfinite(x.value)))


__all__ = [
    "ContractError",
    "DomainError",
    "Graph",
    "Var",
    "affine",
    "backward",
    "dropout",
    "exp",
    "forward_eval",
    "is_finite",
    "log",
    "log_softmax",
    "logsumexp",
    "minimum",
    "power",
    "relu6",
    "reshape",
    "scalar_value",
    "selu",
    "softmax",
    "sum",
    "take",
]
