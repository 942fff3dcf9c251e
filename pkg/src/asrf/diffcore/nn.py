"""Parameter store, MLP blocks, and frequency encoding on top of the graph."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph
from .graph import Node


class ParamStore:
    """Named, ordered collection of trainable leaf nodes.

    Registration order is the iteration order, which keeps optimizer
    updates and checkpoints deterministic.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Node] = {}

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise ValueError(f"parameter '{name}' already registered")
        node = graph.param(np.array(value, dtype=self.dtype))
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def n_scalars(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, node in self._params.items():
            if k not in state:
                raise KeyError(f"state missing parameter '{k}'")
            arr = np.asarray(state[k], dtype=self.dtype)
            if arr.shape != node.value.shape:
                raise ValueError(f"shape mismatch for '{k}': {arr.shape} vs {node.value.shape}")
            node.value = arr.copy()
            node.grad = None


@dataclass(frozen=True)
class MlpSpec:
    """Shape of an MLP body: input width, hidden widths, optional skip concat.

    `skip_at` lists hidden-layer indices whose input gets `skip_dim` extra
    features concatenated.  The body returns the last hidden activation;
    output heads are separate linear layers owned by the caller.
    """

    in_dim: int
    widths: tuple
    skip_at: tuple = ()
    skip_dim: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if len(self.widths) < 1:
            raise ValueError("MlpSpec needs at least one hidden layer")
        for i in self.skip_at:
            if not 0 <= i < len(self.widths):
                raise ValueError(f"skip index {i} out of range for {len(self.widths)} layers")
        if self.skip_at and self.skip_dim <= 0:
            raise ValueError("skip_dim must be positive when skip_at is set")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation '{self.activation}'")

    def layer_dims(self):
        dims = []
        prev = self.in_dim
        for i, w in enumerate(self.widths):
            fan_in = prev + (self.skip_dim if i in self.skip_at else 0)
            dims.append((fan_in, w))
            prev = w
        return dims


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator):
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"{prefix}/W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"{prefix}/b{i}", np.zeros(fan_out))


def mlp_forward(spec: MlpSpec, store: ParamStore, prefix: str, x: Node, skip: Node | None = None) -> Node:
    if x.value.ndim != 2 or x.value.shape[1] != spec.in_dim:
        raise ValueError(f"expected input (N, {spec.in_dim}), got {x.value.shape}")
    if spec.skip_at:
        if skip is None:
            raise ValueError("spec declares skip connections but no skip input given")
        if skip.value.shape != (x.value.shape[0], spec.skip_dim):
            raise ValueError(f"expected skip (N, {spec.skip_dim}), got {skip.value.shape}")
    h = x
    for i in range(len(spec.widths)):
        if i in spec.skip_at:
            h = graph.concat([h, skip], axis=1)
        h = graph.matmul(h, store[f"{prefix}/W{i}"]) + store[f"{prefix}/b{i}"]
        if spec.activation == "relu":
            h = graph.relu(h)
    return h


def init_linear(store: ParamStore, prefix: str, in_dim: int, out_dim: int,
                rng: np.random.Generator, w_scale: float | None = None, bias=None):
    if w_scale is None:
        w_scale = np.sqrt(6.0 / (in_dim + out_dim))
    store.add(f"{prefix}/W", rng.uniform(-w_scale, w_scale, size=(in_dim, out_dim)))
    store.add(f"{prefix}/b", np.zeros(out_dim) if bias is None else np.asarray(bias, dtype=float))


def linear(store: ParamStore, prefix: str, x: Node) -> Node:
    return graph.matmul(x, store[f"{prefix}/W"]) + store[f"{prefix}/b"]


def positional_encoding(x: Node, n_freq: int, include_input: bool = False) -> Node:
    """Concat of sin/cos at octave frequencies: [sin(2^k pi x), cos(2^k pi x)].

    Output feature order is [x?, sin_0, cos_0, sin_1, cos_1, ...] along the
    last axis.  n_freq=0 with include_input returns x unchanged.
    """
    if n_freq < 0:
        raise ValueError("n_freq must be >= 0")
    x = graph.as_node(x)
    parts = [x] if include_input else []
    for k in range(n_freq):
        w = float(2.0 ** k * np.pi)
        xs = x * w
        parts.append(graph.sin(xs))
        parts.append(graph.cos(xs))
    if not parts:
        raise ValueError("n_freq=0 without include_input yields no features")
    if len(parts) == 1:
        return parts[0]
    return graph.concat(parts, axis=x.value.ndim - 1)
