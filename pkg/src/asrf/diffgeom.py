"""Quaternion and vector algebra as graph ops, for gradients through poses."""
from __future__ import annotations

import numpy as np

from .diffcore import graph
from .diffcore.graph import Node


def _col(a: Node, i: int) -> Node:
    return a[:, i:i + 1]


def cross_nodes(a: Node, b: Node) -> Node:
    """Row-wise cross product of (B, 3) nodes."""
    a1, a2, a3 = _col(a, 0), _col(a, 1), _col(a, 2)
    b1, b2, b3 = _col(b, 0), _col(b, 1), _col(b, 2)
    return graph.concat([a2 * b3 - a3 * b2,
                         a3 * b1 - a1 * b3,
                         a1 * b2 - a2 * b1], axis=1)


def quat_mul_nodes(q1: Node, q2: Node) -> Node:
    """Hamilton product of (B, 4) quaternion nodes (w, x, y, z)."""
    w1, x1, y1, z1 = (_col(q1, i) for i in range(4))
    w2, x2, y2, z2 = (_col(q2, i) for i in range(4))
    return graph.concat([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=1)


def quat_rotate_nodes(q: Node, v: Node) -> Node:
    """Rotate (B, 3) vectors by (B, 4) unit quaternions, all graph nodes."""
    w = _col(q, 0)
    u = q[:, 1:4]
    t = cross_nodes(u, v) * 2.0
    return v + w * t + cross_nodes(u, t)


def normalize_rows(v: Node, eps: float = 0.0) -> Node:
    n = graph.sqrt(graph.nsum(v * v, axis=1, keepdims=True) + eps)
    return v / n


def as_batch_const(arr, b: int) -> Node:
    """Constant (B, k) node broadcasting a single row."""
    arr = np.asarray(arr, dtype=np.float64)
    return graph.constant(np.broadcast_to(arr, (b, arr.shape[-1])).copy())
