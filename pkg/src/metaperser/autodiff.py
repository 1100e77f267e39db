"""Reverse-mode automatic differentiation over float64 arrays.

Every graph node eagerly holds its forward value. ``gradient`` walks the graph
backwards and builds the adjoints out of the same primitives, so the returned
gradient nodes are ordinary graph nodes and can be differentiated again::

    x = variable(2.0)
    y = x * x * x
    (dy,) = gradient(y, [x])
    (d2y,) = gradient(dy, [x])   # 12.0

Nodes whose ``requires_grad`` flag is cleared (constants, ``stop_gradient``
outputs) pass no gradient to their parents.
"""

import math

import numpy as np

from metaperser.errors import ContractError, ShapeError

__all__ = [
    "Node",
    "variable",
    "constant",
    "as_node",
    "forward",
    "gradient",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "sum_to",
    "sum",
    "mean",
    "exp",
    "log",
    "relu",
    "heaviside",
    "softmax",
    "log_softmax",
    "layer_mix",
]


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "op", "parents", "attrs", "requires_grad", "name")

    def __init__(self, value, op="leaf", parents=(), attrs=None, requires_grad=False, name=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.value.reshape(()))

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} shape={self.shape} grad={self.requires_grad}>"


def _array(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr is value:
        arr = arr.copy()
    return arr


def variable(value, name=None):
    """Leaf that gradients can be taken with respect to."""
    return Node(_array(value), requires_grad=True, name=name)


def constant(value, name=None):
    return Node(_array(value), requires_grad=False, name=name)


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


# ---------------------------------------------------------------------------
# forward kernels: (parent values, attrs) -> value


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _sum_to_value(v, shape):
    if v.shape == shape:
        return v
    lead = v.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and v.shape[lead + i] != 1
    )
    return v.sum(axis=axes, keepdims=True).reshape(shape)


def _softmax_value(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_value(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


_FORWARD = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "div": lambda v, a: v[0] / v[1],
    "neg": lambda v, a: -v[0],
    "scale": lambda v, a: v[0] * a,
    "matmul": lambda v, a: v[0] @ v[1],
    "transpose": lambda v, a: v[0].T,
    "reshape": lambda v, a: v[0].reshape(a),
    "broadcast_to": lambda v, a: np.broadcast_to(v[0], a).copy(),
    "sum_to": lambda v, a: _sum_to_value(v[0], a),
    "sum": lambda v, a: np.sum(v[0], axis=a[0], keepdims=a[1]),
    "mean": lambda v, a: np.mean(v[0], axis=a[0], keepdims=a[1]),
    "exp": lambda v, a: np.exp(v[0]),
    "log": lambda v, a: np.log(v[0]),
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "heaviside": lambda v, a: (v[0] > 0.0).astype(np.float64),
    "softmax": lambda v, a: _softmax_value(v[0], a),
    "log_softmax": lambda v, a: _log_softmax_value(v[0], a),
    "layer_mix": lambda v, a: np.einsum("l,...ld->...d", v[0], v[1]),
    "stop_gradient": lambda v, a: v[0],
}


def _make(op, parents, attrs=None, differentiable=True):
    value = _FORWARD[op]([p.value for p in parents], attrs)
    requires = differentiable and any(p.requires_grad for p in parents)
    return Node(np.asarray(value, dtype=np.float64), op, tuple(parents), attrs, requires)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a, b)
    return _make("add", (a, b))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", (a, b))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", (a, b))


def div(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape("div", a, b)
    return _make("div", (a, b))


def neg(a):
    return _make("neg", (as_node(a),))


def scale(a, c):
    """Multiply by a Python scalar that is not part of the graph."""
    return _make("scale", (as_node(a),), float(c))


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", (a, b))


def transpose(a):
    a = as_node(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", (a,))


def reshape(a, shape):
    a = as_node(a)
    shape = tuple(int(n) for n in shape)
    if math.prod(shape) != a.size:
        raise ShapeError("reshape", a.shape, shape)
    return _make("reshape", (a,), shape)


def broadcast_to(a, shape):
    a = as_node(a)
    shape = tuple(shape)
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    if a.shape == shape:
        return a
    return _make("broadcast_to", (a,), shape)


def sum_to(a, shape):
    """Sum ``a`` down to ``shape`` (the reverse of broadcasting)."""
    a = as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        if np.broadcast_shapes(a.shape, shape) != a.shape:
            raise ValueError
    except ValueError:
        raise ShapeError("sum_to", a.shape, shape) from None
    return _make("sum_to", (a,), shape)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_node(a)
    return _make("sum", (a,), (_norm_axis(axis, a.ndim), keepdims))


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    return _make("mean", (a,), (_norm_axis(axis, a.ndim), keepdims))


def exp(a):
    return _make("exp", (as_node(a),))


def log(a):
    return _make("log", (as_node(a),))


def relu(a):
    return _make("relu", (as_node(a),))


def heaviside(a):
    """Indicator of ``a > 0``; has zero derivative everywhere."""
    return _make("heaviside", (as_node(a),), differentiable=False)


def softmax(a, axis=-1):
    a = as_node(a)
    return _make("softmax", (a,), axis % a.ndim)


def log_softmax(a, axis=-1):
    a = as_node(a)
    return _make("log_softmax", (a,), axis % a.ndim)


def layer_mix(w, x):
    """Weighted sum over the layer axis: ``w`` (L,), ``x`` (..., L, D) -> (..., D)."""
    w, x = as_node(w), as_node(x)
    if w.ndim != 1 or x.ndim < 2 or x.shape[-2] != w.shape[0]:
        raise ShapeError("layer_mix", w.shape, x.shape)
    return _make("layer_mix", (w, x))


def stop_gradient(a):
    """Identity in the forward pass, constant in the reverse pass."""
    return _make("stop_gradient", (as_node(a),), differentiable=False)


# ---------------------------------------------------------------------------
# reverse rules: (node, upstream gradient node) -> gradient per parent
# Rules are written with the primitives above so they stay differentiable.


def _expand_reduced(g, node):
    """Broadcast the gradient of a reduction back to the input shape."""
    (a,) = node.parents
    axis, keepdims = node.attrs
    if axis is None:
        kept = (1,) * a.ndim
    else:
        kept = tuple(1 if i in axis else n for i, n in enumerate(a.shape))
    if not keepdims:
        g = reshape(g, kept)
    return broadcast_to(g, a.shape)


def _vjp_add(node, g):
    a, b = node.parents
    return sum_to(g, a.shape), sum_to(g, b.shape)


def _vjp_sub(node, g):
    a, b = node.parents
    return sum_to(g, a.shape), (sum_to(neg(g), b.shape) if b.requires_grad else None)


def _vjp_mul(node, g):
    a, b = node.parents
    ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
    gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
    return ga, gb


def _vjp_div(node, g):
    a, b = node.parents
    ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
    gb = sum_to(neg(div(mul(g, node), b)), b.shape) if b.requires_grad else None
    return ga, gb


def _vjp_matmul(node, g):
    a, b = node.parents
    ga = matmul(g, transpose(b)) if a.requires_grad else None
    gb = matmul(transpose(a), g) if b.requires_grad else None
    return ga, gb


def _vjp_sum(node, g):
    return (_expand_reduced(g, node),)


def _vjp_mean(node, g):
    (a,) = node.parents
    return (scale(_expand_reduced(g, node), node.size / a.size),)


def _vjp_softmax(node, g):
    axis = node.attrs
    inner = sub(g, sum(mul(g, node), axis=axis, keepdims=True))
    return (mul(node, inner),)


def _vjp_log_softmax(node, g):
    axis = node.attrs
    return (sub(g, mul(exp(node), sum(g, axis=axis, keepdims=True))),)


def _vjp_layer_mix(node, g):
    w, x = node.parents
    L = w.shape[0]
    g_exp = reshape(g, g.shape[:-1] + (1, g.shape[-1]))
    gw = reshape(sum_to(mul(g_exp, x), (L, 1)), (L,)) if w.requires_grad else None
    gx = sum_to(mul(g_exp, reshape(w, (L, 1))), x.shape) if x.requires_grad else None
    return gw, gx


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda node, g: (neg(g),),
    "scale": lambda node, g: (scale(g, node.attrs),),
    "matmul": _vjp_matmul,
    "transpose": lambda node, g: (transpose(g),),
    "reshape": lambda node, g: (reshape(g, node.parents[0].shape),),
    "broadcast_to": lambda node, g: (sum_to(g, node.parents[0].shape),),
    "sum_to": lambda node, g: (broadcast_to(g, node.parents[0].shape),),
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "exp": lambda node, g: (mul(g, node),),
    "log": lambda node, g: (div(g, node.parents[0]),),
    "relu": lambda node, g: (mul(g, heaviside(node.parents[0])),),
    "softmax": _vjp_softmax,
    "log_softmax": _vjp_log_softmax,
    "layer_mix": _vjp_layer_mix,
}


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root, differentiable_only):
    """Parents-before-children ordering of the nodes reachable from ``root``."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if differentiable_only and not node.requires_grad:
            continue
        for p in node.parents:
            if id(p) not in visited and (p.requires_grad or not differentiable_only):
                stack.append((p, False))
    return order


def forward(expr, feed=None):
    """Value of ``expr``; with ``feed`` ({leaf: array}) the graph is re-evaluated.

    Re-evaluation rebinds the given leaves and refreshes every cached
    intermediate value reachable from ``expr``.
    """
    if not feed:
        return expr.value
    for leaf, value in feed.items():
        if leaf.op != "leaf":
            raise ContractError(f"can only bind leaf nodes, got {leaf!r}")
        value = _array(value)
        if value.shape != leaf.shape:
            raise ShapeError("forward", leaf.shape, value.shape)
        leaf.value = value
    for node in _topo_order(expr, differentiable_only=False):
        if node.op != "leaf":
            value = _FORWARD[node.op]([p.value for p in node.parents], node.attrs)
            node.value = np.asarray(value, dtype=np.float64)
    return expr.value


def gradient(expr, wrt):
    """Gradients of scalar ``expr`` with respect to each node in ``wrt``.

    The results are graph nodes; nodes that do not influence ``expr`` get a
    zero constant.
    """
    if expr.size != 1:
        raise ContractError(f"gradient needs a scalar expression, got shape {expr.shape}")
    adjoint = {id(expr): constant(np.ones_like(expr.value))}
    if expr.requires_grad:
        order = _topo_order(expr, differentiable_only=True)
        # only nodes downstream of some target can carry gradient to it
        targets = {id(w) for w in wrt}
        relevant = set()
        for node in order:
            if id(node) in targets or any(id(p) in relevant for p in node.parents):
                relevant.add(id(node))
        for node in reversed(order):
            g = adjoint.get(id(node))
            if g is None or not any(id(p) in relevant for p in node.parents):
                continue
            grads = _VJP[node.op](node, g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad or id(parent) not in relevant:
                    continue
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = adjoint.get(id(w)) if (w is expr or w.requires_grad) else None
        out.append(g if g is not None else constant(np.zeros_like(w.value)))
    return out
