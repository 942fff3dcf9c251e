"""Array-valued reverse-mode autodiff with a forward-mode tangent transform.

Nodes wrap numpy arrays and record their parents plus closures for the
backward (vector-Jacobian) and forward (Jacobian-vector) rules.  The jvp
rules build ordinary graph nodes, so forward tangents are themselves
differentiable and second-order quantities (gradients of a derivative)
come out of a single extra backward pass.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class Node:
    __slots__ = ("value", "grad", "parents", "_vjp", "_jvp", "requires_grad", "nid")

    def __init__(self, value, parents=(), vjp=None, jvp=None, requires_grad=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self._vjp = vjp
        self._jvp = jvp
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.nid = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are wrapped as constants of matching dtype
    def __add__(self, other):
        return add(self, _wrap(other, self.value.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.value.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.value.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.value.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.value.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.value.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def constant(value, dtype=None) -> Node:
    return Node(np.asarray(value, dtype=dtype), requires_grad=False)


def param(value, dtype=None) -> Node:
    return Node(np.asarray(value, dtype=dtype), requires_grad=True)


def as_node(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x, dtype=dtype)


def _wrap(x, dtype):
    if isinstance(x, Node):
        return x
    if isinstance(x, (int, float)):
        return constant(np.asarray(x, dtype=dtype))
    return constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _ensure_shape(t: Node, shape: tuple) -> Node:
    if t.value.shape == shape:
        return t
    return broadcast_to(t, shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value + b.value, (a, b),
               vjp=lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))

    def jvp(ta, tb):
        if ta is None:
            t = tb
        elif tb is None:
            t = ta
        else:
            t = add(ta, tb)
        return _ensure_shape(t, out.value.shape)

    out._jvp = jvp
    return out


def sub(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value - b.value, (a, b),
               vjp=lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)))

    def jvp(ta, tb):
        if ta is None:
            t = neg(tb)
        elif tb is None:
            t = ta
        else:
            t = sub(ta, tb)
        return _ensure_shape(t, out.value.shape)

    out._jvp = jvp
    return out


def mul(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value * b.value, (a, b),
               vjp=lambda g: (_unbroadcast(g * b.value, a.value.shape),
                              _unbroadcast(g * a.value, b.value.shape)))

    def jvp(ta, tb):
        if ta is None:
            t = mul(a, tb)
        elif tb is None:
            t = mul(ta, b)
        else:
            t = add(mul(ta, b), mul(a, tb))
        return _ensure_shape(t, out.value.shape)

    out._jvp = jvp
    return out


def div(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value / b.value, (a, b),
               vjp=lambda g: (_unbroadcast(g / b.value, a.value.shape),
                              _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)))

    def jvp(ta, tb):
        if tb is None:
            t = div(ta, b)
        else:
            rest = div(mul(a, tb), mul(b, b))
            t = sub(div(ta, b), rest) if ta is not None else neg(rest)
        return _ensure_shape(t, out.value.shape)

    out._jvp = jvp
    return out


def neg(a: Node) -> Node:
    a = as_node(a)
    out = Node(-a.value, (a,), vjp=lambda g: (-g,))
    out._jvp = lambda ta: neg(ta)
    return out


def power(a: Node, p) -> Node:
    """Elementwise a**p for a constant (non-node) exponent."""
    a = as_node(a)
    p = float(p)
    out = Node(a.value ** p, (a,),
               vjp=lambda g: (g * p * a.value ** (p - 1.0),))
    out._jvp = lambda ta: mul(ta, mul(power(a, p - 1.0), constant(np.asarray(p, dtype=a.value.dtype))))
    return out


def exp(a: Node) -> Node:
    a = as_node(a)
    out = Node(np.exp(a.value), (a,))
    out._vjp = lambda g: (g * out.value,)
    out._jvp = lambda ta: mul(ta, out)
    return out


def log(a: Node) -> Node:
    a = as_node(a)
    out = Node(np.log(a.value), (a,), vjp=lambda g: (g / a.value,))
    out._jvp = lambda ta: div(ta, a)
    return out


def sqrt(a: Node) -> Node:
    a = as_node(a)
    out = Node(np.sqrt(a.value), (a,))
    out._vjp = lambda g: (g * (0.5 / out.value),)
    out._jvp = lambda ta: div(mul(ta, constant(np.asarray(0.5, dtype=a.value.dtype))), out)
    return out


def sin(a: Node) -> Node:
    a = as_node(a)
    out = Node(np.sin(a.value), (a,), vjp=lambda g: (g * np.cos(a.value),))
    out._jvp = lambda ta: mul(ta, cos(a))
    return out


def cos(a: Node) -> Node:
    a = as_node(a)
    out = Node(np.cos(a.value), (a,), vjp=lambda g: (-g * np.sin(a.value),))
    out._jvp = lambda ta: neg(mul(ta, sin(a)))
    return out


def relu(a: Node) -> Node:
    a = as_node(a)
    mask = a.value > 0
    out = Node(np.where(mask, a.value, 0.0), (a,), vjp=lambda g: (g * mask,))
    # derivative of the mask itself is zero almost everywhere
    out._jvp = lambda ta: mul(ta, constant(mask.astype(a.value.dtype)))
    return out


def _sigmoid_val(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    a = as_node(a)
    out = Node(_sigmoid_val(np.asarray(a.value, dtype=float) if a.value.dtype.kind != "f" else a.value), (a,))
    out._vjp = lambda g: (g * out.value * (1.0 - out.value),)
    out._jvp = lambda ta: mul(ta, mul(out, sub(constant(np.asarray(1.0, dtype=out.value.dtype)), out)))
    return out


def softplus(a: Node) -> Node:
    a = as_node(a)
    out = Node(np.logaddexp(0.0, a.value).astype(a.value.dtype), (a,))
    s = _sigmoid_val(a.value)
    out._vjp = lambda g: (g * s,)
    out._jvp = lambda ta: mul(ta, sigmoid(a))
    return out


def matmul(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}")
    out = Node(a.value @ b.value, (a, b),
               vjp=lambda g: (g @ b.value.T, a.value.T @ g))

    def jvp(ta, tb):
        if ta is None:
            return matmul(a, tb)
        if tb is None:
            return matmul(ta, b)
        return add(matmul(ta, b), matmul(a, tb))

    out._jvp = jvp
    return out


def nsum(a: Node, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).astype(a.value.dtype, copy=False),)

    out = Node(out_val, (a,), vjp=vjp)
    out._jvp = lambda ta: nsum(ta, axis=axis, keepdims=keepdims)
    return out


def nmean(a: Node, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return nsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def cumsum(a: Node, axis: int) -> Node:
    a = as_node(a)
    out = Node(np.cumsum(a.value, axis=axis), (a,),
               vjp=lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))
    out._jvp = lambda ta: cumsum(ta, axis)
    return out


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    out = Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes),
               vjp=lambda g: tuple(np.split(g, splits, axis=axis)))

    def jvp(*tans):
        parts = []
        for n, t in zip(nodes, tans):
            if t is None:
                parts.append(constant(np.zeros_like(n.value)))
            else:
                parts.append(_ensure_shape(t, n.value.shape))
        return concat(parts, axis=axis)

    out._jvp = jvp
    return out


def reshape(a: Node, shape) -> Node:
    a = as_node(a)
    out = Node(a.value.reshape(shape), (a,),
               vjp=lambda g: (g.reshape(a.value.shape),))
    out._jvp = lambda ta: reshape(_ensure_shape(ta, a.value.shape), shape)
    return out


def broadcast_to(a: Node, shape) -> Node:
    a = as_node(a)
    out = Node(np.broadcast_to(a.value, shape), (a,),
               vjp=lambda g: (_unbroadcast(g, a.value.shape),))
    out._jvp = lambda ta: broadcast_to(ta, shape)
    return out


def gather(a: Node, idx) -> Node:
    """Select rows a[idx] along axis 0; idx is an integer array."""
    a = as_node(a)
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ValueError("gather index must be integer")

    def vjp(g):
        z = np.zeros_like(a.value)
        np.add.at(z, idx, g)
        return (z,)

    out = Node(a.value[idx], (a,), vjp=vjp)
    out._jvp = lambda ta: gather(_ensure_shape(ta, a.value.shape), idx)
    return out


def getitem(a: Node, key) -> Node:
    """Basic (non-fancy) indexing: ints, slices, tuples thereof."""
    a = as_node(a)
    _check_basic(key)

    def vjp(g):
        z = np.zeros_like(a.value)
        z[key] += g
        return (z,)

    out = Node(a.value[key], (a,), vjp=vjp)
    out._jvp = lambda ta: getitem(_ensure_shape(ta, a.value.shape), key)
    return out


def _check_basic(key):
    parts = key if isinstance(key, tuple) else (key,)
    for k in parts:
        if not isinstance(k, (int, np.integer, slice, type(None), type(Ellipsis))):
            raise ValueError("getitem supports basic indexing only; use gather for index arrays")


def detach(a: Node) -> Node:
    return constant(a.value)


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Node) -> list:
    """Post-order over the requires_grad subgraph, parents before children."""
    order, visited = [], set()
    stack = [(root, iter(root.parents))]
    visited.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p.parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into .grad over the graph below `loss`."""
    if not isinstance(loss, Node):
        raise TypeError("backward expects the scalar loss node of a prior forward pass")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any parameter")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        contribs = node._vjp(node.grad)
        for parent, c in zip(node.parents, contribs):
            if c is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += c


# ---------------------------------------------------------------------------
# forward pass (tangents)


def jvp(outputs: Sequence[Node], wrt: Node, tangent) -> list:
    """Tangent nodes of `outputs` for a perturbation `tangent` of `wrt`.

    The returned tangents are graph nodes built from regular primitives,
    so they can be fed back into losses and differentiated again.
    Outputs that do not depend on `wrt` map to None.
    """
    seed = tangent if isinstance(tangent, Node) else constant(np.broadcast_to(np.asarray(tangent, dtype=wrt.value.dtype), wrt.value.shape).copy())
    tans: dict[int, Node] = {id(wrt): seed}

    # collect the full subgraph under the outputs
    seen: set[int] = set()
    order: list[Node] = []
    stack = [(o, iter(o.parents)) for o in outputs]
    for o in outputs:
        seen.add(id(o))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p.parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()

    order.sort(key=lambda n: n.nid)
    for node in order:
        if id(node) in tans and node is not wrt:
            continue
        if node is wrt or not node.parents or node._jvp is None:
            continue
        ptans = tuple(tans.get(id(p)) for p in node.parents)
        if all(t is None for t in ptans):
            continue
        tans[id(node)] = node._jvp(*ptans)
    return [tans.get(id(o)) for o in outputs]


def forward_derivative(f: Callable[[Node], Node], t: float) -> np.ndarray:
    """d f / d t at a scalar t, for f built from graph primitives."""
    t_node = constant(np.asarray(float(t)))
    out = f(t_node)
    (tan,) = jvp([out], t_node, np.ones_like(t_node.value))
    if tan is None:
        return np.zeros_like(out.value)
    return np.broadcast_to(tan.value, out.value.shape).copy()
