"""Gradient-descent optimizers with per-parameter buffers keyed by store name."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ParamStore


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState, names=None):
    """One update; grads are cleared after.  `names` restricts the subset so
    parameter groups can run distinct learning rates off one store."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    items = store.items() if names is None else [(n, store[n]) for n in names]
    for name, node in items:
        g = node.grad
        if g is None:
            g = np.zeros_like(node.value)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(node.value)
            state.v[name] = np.zeros_like(node.value)
        v = state.v[name]
        if m.shape != node.value.shape:
            raise ValueError(f"moment shape mismatch for '{name}': {m.shape} vs {node.value.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        node.value = node.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        node.grad = None


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    clip: float = 0.0               # global grad-norm cap, 0 = off
    m: dict = field(default_factory=dict)


def sgd_step(store: ParamStore, state: SgdState, names=None):
    """Momentum SGD update; grads are cleared after.

    Unlike Adam, step size stays proportional to the gradient, so parameters
    sitting at small residuals barely move.  Optional global-norm clipping
    bounds the worst-case step under outlier batches.
    """
    items = store.items() if names is None else [(n, store[n]) for n in names]
    scale = 1.0
    if state.clip > 0:
        sq = 0.0
        for _, node in items:
            if node.grad is not None:
                sq += float(np.sum(node.grad * node.grad))
        norm = np.sqrt(sq)
        if norm > state.clip:
            scale = state.clip / norm
    for name, node in items:
        g = node.grad
        if g is None:
            g = np.zeros_like(node.value)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(node.value)
        if m.shape != node.value.shape:
            raise ValueError(f"moment shape mismatch for '{name}': {m.shape} vs {node.value.shape}")
        m *= state.momentum
        m += scale * g
        node.value = node.value - state.lr * m
        node.grad = None
