"""Optimizers that take an :class:`UpdateDirection` in place of the gradient."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

LR_GRID = (1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001)


def lr_grid() -> list[float]:
    """Learning-rate search grid, largest first."""
    return list(LR_GRID)


class OptimKind(str, Enum):
    SGD = "sgd"
    MOMENTUM = "momentum"
    ADAM = "adam"


class NonFiniteUpdateError(FloatingPointError):
    """The update direction contained NaN or Inf; the step was not applied."""


@dataclass
class OptimState:
    kind: OptimKind = OptimKind.SGD
    lr: float = 0.1
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    # keyed by ("w" | "b", layer index) for the first moment / velocity and
    # the second moment respectively
    buf1: dict = field(default_factory=dict)
    buf2: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = OptimKind(self.kind)
        if not self.lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def buffer_bytes(self) -> int:
        return sum(v.nbytes for v in self.buf1.values()) + sum(v.nbytes for v in self.buf2.values())


def _step(param, d, key, state, bc1, bc2):
    if state.kind is OptimKind.SGD:
        return param - state.lr * d
    if state.kind is OptimKind.MOMENTUM:
        v = state.buf1.get(key)
        v = d.copy() if v is None else state.momentum * v + d
        state.buf1[key] = v
        return param - state.lr * v
    beta1, beta2 = state.betas
    m = state.buf1.get(key, np.zeros_like(d))
    v = state.buf2.get(key, np.zeros_like(d))
    m = beta1 * m + (1 - beta1) * d
    v = beta2 * v + (1 - beta2) * d * d
    state.buf1[key], state.buf2[key] = m, v
    return param - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def apply_update(model, direction, state: OptimState):
    """Apply one optimizer step in place and return the model.

    Rejects the whole step (model and buffers untouched) if any direction
    entry is non-finite.
    """
    if len(direction.weights) != len(model.layers):
        raise ValueError("direction and model have different layer counts")
    for i, (layer, dw, db) in enumerate(zip(model.layers, direction.weights, direction.biases)):
        if dw.shape != layer.weight.shape:
            raise ValueError(f"layer {i}: direction shape {dw.shape} != weight shape {layer.weight.shape}")
        if (db is None) != (layer.bias is None) or (db is not None and db.shape != layer.bias.shape):
            raise ValueError(f"layer {i}: bias direction does not match the bias")
        if not np.all(np.isfinite(dw)) or (db is not None and not np.all(np.isfinite(db))):
            raise NonFiniteUpdateError(f"layer {i}: non-finite update direction, step rejected")

    state.step += 1
    beta1, beta2 = state.betas
    bc1 = 1 - beta1 ** state.step
    bc2 = 1 - beta2 ** state.step
    for i, (layer, dw, db) in enumerate(zip(model.layers, direction.weights, direction.biases)):
        layer.weight = _step(layer.weight, dw, ("w", i), state, bc1, bc2).astype(layer.weight.dtype, copy=False)
        if db is not None:
            layer.bias = _step(layer.bias, db, ("b", i), state, bc1, bc2).astype(layer.bias.dtype, copy=False)
    return model
