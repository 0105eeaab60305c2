"""RMSprop with momentum and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, DivergedError
from .tensor import ParamStore


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    alpha: float = 0.9
    eps: float = 1e-8
    kind: str = "rmsprop"
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)
    momentum_buffer: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def __post_init__(self):
        if self.kind != "rmsprop":
            raise ConfigurationError(f"unsupported optimizer {self.kind!r}")
        if self.lr < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1 or not 0 <= self.alpha < 1:
            raise ConfigurationError("momentum and alpha must lie in [0, 1)")


def rmsprop_step(params: ParamStore, state: OptimizerState) -> None:
    """One update of every parameter in ``params`` from its ``.grad``.

    Weight decay is applied straight to the weights (``p -= lr * wd * p``)
    before the RMSprop-with-momentum step::

        v = alpha * v + (1 - alpha) * g**2
        b = momentum * b + g / (sqrt(v) + eps)
        p -= lr * b

    Raises :class:`DivergedError` without touching any parameter if a
    gradient is non-finite.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros(p.shape) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"non-finite gradient for {name!r} at step {state.steps}")
        grads[name] = g
    lr, wd = state.lr, state.weight_decay
    for name, p in params.items():
        g = grads[name]
        if wd:
            p.data = p.data - lr * wd * p.data
        v = state.square_avg.get(name)
        v = (1.0 - state.alpha) * g * g if v is None else state.alpha * v + (1.0 - state.alpha) * g * g
        state.square_avg[name] = v
        step = g / (np.sqrt(v) + state.eps)
        b = state.momentum_buffer.get(name)
        b = step if b is None else state.momentum * b + step
        state.momentum_buffer[name] = b
        p.data = p.data - lr * b
    state.steps += 1
