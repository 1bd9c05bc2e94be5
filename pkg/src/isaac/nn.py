"""Multilayer perceptrons with tapes of the per-layer quantities conditioners need.

Layout: a layer computes ``z = a @ W + bias`` with ``W`` of shape
``d_in x d_out``; batches are rows. Losses are means over the batch of
per-sample losses:

* MSE: ``0.5 * ||f - y||^2`` (per-sample loss Hessian is exactly I)
* softmax cross-entropy: ``-sum(y * log_softmax(f))``

``LayerTape.g`` holds per-sample gradients ``d loss_n / d z`` (one row per
sample, *not* divided by the batch size), so the weight gradient of the
batch-mean loss is ``X.T @ g / b``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


class Loss(str, Enum):
    MSE = "mse"
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"


_ACT_CODES = {Activation.IDENTITY: 0, Activation.RELU: 1}
_CODE_ACTS = {v: k for k, v in _ACT_CODES.items()}
CHECKPOINT_MAGIC = b"ISAAC1"


@dataclass
class Layer:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    activation: Activation = Activation.RELU

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class Mlp:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an Mlp needs at least one layer")
        for i, layer in enumerate(self.layers):
            layer.activation = Activation(layer.activation)
            if layer.bias is not None:
                layer.bias = np.asarray(layer.bias).reshape(1, -1)
                if layer.bias.shape[1] != layer.d_out:
                    raise ValueError(f"layer {i}: bias length {layer.bias.shape[1]} != {layer.d_out}")
            if i and layer.d_in != self.layers[i - 1].d_out:
                raise ValueError(
                    f"layer {i} expects {layer.d_in} inputs but layer {i - 1} "
                    f"produces {self.layers[i - 1].d_out}"
                )
        if self.layers[-1].activation is not Activation.IDENTITY:
            raise ValueError("the final layer must use the identity activation")

    @classmethod
    def init(cls, sizes, activation=Activation.RELU, bias=True, seed=0, dtype=np.float32) -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        layers = []
        for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)
            b = rng.uniform(-bound, bound, size=(1, d_out)).astype(dtype) if bias else None
            act = Activation.IDENTITY if i == len(sizes) - 2 else Activation(activation)
            layers.append(Layer(w, b, act))
        return cls(layers)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]

    def copy(self) -> "Mlp":
        return Mlp([
            Layer(l.weight.copy(), None if l.bias is None else l.bias.copy(), l.activation)
            for l in self.layers
        ])

    def astype(self, dtype) -> "Mlp":
        return Mlp([
            Layer(l.weight.astype(dtype), None if l.bias is None else l.bias.astype(dtype), l.activation)
            for l in self.layers
        ])


@dataclass
class LayerTape:
    x: np.ndarray
    z: np.ndarray
    g: Optional[np.ndarray] = None
    g_sampled: Optional[np.ndarray] = None

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    @property
    def rank(self) -> int:
        """Number of stacked curvature rounds in ``g_sampled``."""
        if self.g_sampled is None:
            return 0
        return self.g_sampled.shape[0] // self.x.shape[0]


def _act(z, activation):
    return np.maximum(z, 0) if activation is Activation.RELU else z


def _act_grad(z, activation):
    # ReLU subgradient at 0 is 0
    if activation is Activation.RELU:
        return (z > 0).astype(z.dtype)
    return None


def forward(model: Mlp, x) -> tuple[np.ndarray, list[LayerTape]]:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != model.layers[0].d_in:
        raise ValueError(f"input shape {x.shape} does not match d_in={model.layers[0].d_in}")
    tapes = []
    a = x
    for layer in model.layers:
        z = a @ layer.weight
        if layer.bias is not None:
            z = z + layer.bias
        tapes.append(LayerTape(x=a, z=z))
        a = _act(z, layer.activation)
    return a, tapes


def _backprop(model: Mlp, tapes, grad_out) -> list[np.ndarray]:
    """Per-layer ``d/dz`` rows given ``d/d output`` rows."""
    deltas = [None] * len(model.layers)
    delta = grad_out
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dphi = _act_grad(tapes[i].z, layer.activation)
        if dphi is not None:
            if delta.shape[0] != dphi.shape[0]:
                dphi = np.tile(dphi, (delta.shape[0] // dphi.shape[0], 1))
            delta = delta * dphi
        deltas[i] = delta
        if i:
            delta = delta @ layer.weight.T
    return deltas


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_target(output, target):
    target = np.asarray(target)
    if target.shape != output.shape:
        raise ValueError(f"target shape {target.shape} does not match output shape {output.shape}")
    return target


def loss_grad(output, target, loss: Loss) -> np.ndarray:
    """Per-sample gradient of the loss w.r.t. the network output."""
    target = _check_target(output, target)
    if Loss(loss) is Loss.MSE:
        return output - target
    return softmax(output) * target.sum(axis=1, keepdims=True) - target


def loss_and_metrics(output, target, loss: Loss) -> tuple[float, Optional[float]]:
    """Batch-mean loss, plus argmax accuracy for cross-entropy."""
    target = _check_target(output, target)
    loss = Loss(loss)
    if loss is Loss.MSE:
        diff = output - target
        return float(0.5 * np.sum(diff * diff) / output.shape[0]), None
    value = float(-np.sum(target * log_softmax(output)) / output.shape[0])
    accuracy = float(np.mean(np.argmax(output, axis=1) == np.argmax(target, axis=1)))
    return value, accuracy


def backward(model: Mlp, tapes, output, target, loss: Loss):
    """Fill ``tape.g`` for every layer.

    Returns ``(loss_value, tapes, bias_grads)`` where ``bias_grads[i]`` is the
    gradient of the batch-mean loss w.r.t. layer ``i``'s bias (``None`` for
    bias-free layers).
    """
    value, _ = loss_and_metrics(output, target, loss)
    deltas = _backprop(model, tapes, loss_grad(output, target, loss))
    b = output.shape[0]
    bias_grads = []
    for tape, delta, layer in zip(tapes, deltas, model.layers):
        tape.g = delta
        bias_grads.append(None if layer.bias is None else delta.sum(axis=0, keepdims=True) / b)
    return value, tapes, bias_grads


def weight_grads(tapes) -> list[np.ndarray]:
    """Weight gradients ``X^T g / b`` of the batch-mean loss, in weight layout."""
    return [t.x.T @ t.g / t.batch_size for t in tapes]


def backward_sampled(model: Mlp, tapes, output, loss: Loss, r: int = 1, rng=None, mse_sigma: float = 1.0):
    """Fill ``tape.g_sampled`` with Monte-Carlo square-root curvature rows.

    Each of ``r`` rounds draws ``y_hat ~ p_f(x)`` (Gaussian centred at the
    output with standard deviation ``mse_sigma`` for MSE, categorical over
    ``softmax(output)`` for cross-entropy) and backpropagates
    ``grad_f loss(f, y_hat)``. Rounds are stacked round-major and scaled by
    ``1/sqrt(r)`` so that ``G.T @ G / b`` averages over rounds.

    ``mse_sigma=0`` makes every sample degenerate (``y_hat == output``).
    """
    if r < 1:
        raise ValueError("r must be at least 1")
    loss = Loss(loss)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    b, k = output.shape
    rounds = []
    for _ in range(r):
        if loss is Loss.MSE:
            noise = rng.standard_normal((b, k)).astype(output.dtype)
            # grad of 0.5||f - y_hat||^2 at y_hat = f + sigma * eps
            rounds.append(-mse_sigma * noise)
        elif loss is Loss.SOFTMAX_CROSS_ENTROPY:
            p = softmax(output.astype(np.float64))
            u = rng.random((b, 1))
            labels = np.minimum((u > np.cumsum(p, axis=1)).sum(axis=1), k - 1)
            onehot = np.zeros_like(p)
            onehot[np.arange(b), labels] = 1.0
            rounds.append((p - onehot).astype(output.dtype))
        else:
            raise ValueError(f"unsupported loss {loss}")
    grad_out = np.concatenate(rounds, axis=0) / np.sqrt(r).astype(output.dtype)
    for tape, delta in zip(tapes, _backprop(model, tapes, grad_out)):
        tape.g_sampled = delta
    return tapes


def loss_hessian_sqrt(output_row, loss: Loss) -> np.ndarray:
    """``S`` with ``S @ S.T`` equal to the per-sample loss Hessian w.r.t. the output."""
    output_row = np.asarray(output_row)
    k = output_row.shape[-1]
    if Loss(loss) is Loss.MSE:
        return np.eye(k, dtype=output_row.dtype)
    p = softmax(output_row.reshape(1, -1))[0]
    sq = np.sqrt(p)
    # (diag(sq) - p sq^T)(diag(sq) - sq p^T) = diag(p) - p p^T since sum(p) = 1
    return np.diag(sq) - np.outer(p, sq)


def backward_exact(model: Mlp, tapes, output, loss: Loss):
    """Fill ``tape.g_sampled`` with the exact square-root curvature rows.

    Round ``k`` backpropagates column ``k`` of the per-sample Hessian square
    root, so there are ``r = d_out`` rounds and no ``1/sqrt(r)`` scaling:
    ``G.T @ G`` equals the sum over the batch of ``J^T H J``.
    """
    b, k = output.shape
    if Loss(loss) is Loss.MSE:
        grad_out = np.repeat(np.eye(k, dtype=output.dtype), b, axis=0)
    else:
        sqrt_h = np.stack([loss_hessian_sqrt(row, loss) for row in output])  # b x k x k
        grad_out = np.transpose(sqrt_h, (2, 0, 1)).reshape(k * b, k)
    for tape, delta in zip(tapes, _backprop(model, tapes, grad_out)):
        tape.g_sampled = delta
    return tapes


def save_checkpoint(model: Mlp, path) -> None:
    """Little-endian binary checkpoint.

    Header: ``b"ISAAC1"``, u32 layer count, then per layer u32 d_in, u32 d_out,
    u8 activation code (0 identity, 1 relu), u8 bias flag. Body: every
    layer's weight as row-major float32 in layer order, then every present
    bias in layer order.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack(
            "<IIBB", layer.d_in, layer.d_out, _ACT_CODES[layer.activation], layer.bias is not None
        ))
    for layer in model.layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
    for layer in model.layers:
        if layer.bias is not None:
            parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Mlp:
    data = Path(path).read_bytes()
    if data[:6] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an ISAAC1 checkpoint")
    (count,) = struct.unpack_from("<I", data, 6)
    offset = 10
    specs = []
    for _ in range(count):
        specs.append(struct.unpack_from("<IIBB", data, offset))
        offset += 10
    expected = offset + 4 * sum(d_in * d_out + (d_out if has_bias else 0) for d_in, d_out, _, has_bias in specs)
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    weights = []
    for d_in, d_out, _, _ in specs:
        weights.append(np.frombuffer(data, dtype="<f4", count=d_in * d_out, offset=offset).reshape(d_in, d_out).astype(np.float32))
        offset += 4 * d_in * d_out
    layers = []
    for (d_in, d_out, code, has_bias), w in zip(specs, weights):
        bias = None
        if has_bias:
            bias = np.frombuffer(data, dtype="<f4", count=d_out, offset=offset).reshape(1, d_out).astype(np.float32)
            offset += 4 * d_out
        layers.append(Layer(w, bias, _CODE_ACTS[code]))
    return Mlp(layers)
