"""Central finite-difference checks for gradients produced by the graph."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import graph
from .nn import ParamStore


def _rel_err(a: float, fd: float, floor: float = 1e-6) -> float:
    return abs(a - fd) / max(abs(a), abs(fd), floor)


def grad_check_params(build_loss: Callable[[], graph.Node], store: ParamStore,
                      rng: np.random.Generator, names=None, entries_per_param: int = 4,
                      h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    `build_loss` must rerun the forward pass from current store values.
    Checks a random subset of scalar entries per parameter.
    """
    store.zero_grad()
    loss = build_loss()
    graph.backward(loss)
    grads = {k: (np.zeros_like(v.value) if v.grad is None else v.grad.copy())
             for k, v in store.items()}
    store.zero_grad()

    worst = 0.0
    for name, node in store.items():
        if names is not None and name not in names:
            continue
        flat = node.value.reshape(-1)
        n = flat.size
        take = min(entries_per_param, n)
        idxs = rng.choice(n, size=take, replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + h
            lp = float(build_loss().value)
            flat[i] = keep - h
            lm = float(build_loss().value)
            flat[i] = keep
            fd = (lp - lm) / (2.0 * h)
            worst = max(worst, _rel_err(float(grads[name].reshape(-1)[i]), fd))
    return worst


def grad_check_input(f: Callable[[graph.Node], graph.Node], x0: np.ndarray,
                     h: float = 1e-5) -> float:
    """Max relative error of d f/d x at x0 (f scalar-valued), all entries."""
    x0 = np.asarray(x0, dtype=np.float64)
    xn = graph.param(x0.copy())
    loss = f(xn)
    graph.backward(loss)
    ad = xn.grad.copy() if xn.grad is not None else np.zeros_like(x0)

    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        lp = float(f(graph.constant(x0.copy())).value)
        flat[i] = keep - h
        lm = float(f(graph.constant(x0.copy())).value)
        flat[i] = keep
        fd = (lp - lm) / (2.0 * h)
        worst = max(worst, _rel_err(float(ad.reshape(-1)[i]), fd))
    return worst
