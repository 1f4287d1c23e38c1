"""Classic momentum SGD: ``v <- m*v + g``, ``p <- p - lr*v``."""

from __future__ import annotations

from typing import Iterable, Mapping, MutableMapping

import numpy as np

from .tensor import Parameter, ShapeError


def sgd_momentum_step(
    params: Mapping[str, Parameter],
    grads: Mapping[str, np.ndarray | None],
    lr: float,
    momentum: float,
    state: MutableMapping[str, np.ndarray],
) -> None:
    """Update ``params`` in place; ``state`` holds one velocity array per name."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ShapeError(f"{name}: optimizer state shape {v.shape} != parameter shape {p.shape}")
        v = momentum * v + g
        state[name] = v
        p.data -= lr * v


class SGDMomentum:
    def __init__(self, params: Iterable[Parameter], lr: float = 3e-4, momentum: float = 0.9):
        self.params = {p.name: p for p in params}
        self.lr = lr
        self.momentum = momentum
        self.state: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items()}
        sgd_momentum_step(self.params, grads, self.lr, self.momentum, self.state)
