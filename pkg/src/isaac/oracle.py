"""Brute-force references for testing the conditioners and the network.

Everything here is deliberately naive: explicit inverses, materialized
Kronecker products, per-sample Jacobians, central differences. Only toy
sizes are supported. None of it goes through :mod:`isaac.linalg` or the
Woodbury forms in :mod:`isaac.conditioner`.

Parameters of a layer are vectorized as the row-major flattening of the
``d_out x d_in`` matrix ``W.T`` (the orientation of ``g.T X``), so Kronecker
factors appear as (output side) ⊗ (input side).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Activation, Loss, loss_and_metrics, forward

MAX_VEC_DIM = 4096


class OracleSizeError(ValueError):
    pass


def _guard(dim):
    if dim > MAX_VEC_DIM:
        raise OracleSizeError(f"vec dimension {dim} exceeds oracle limit {MAX_VEC_DIM}")


@dataclass(frozen=True)
class DenseStepOracle:
    """Materialized ``(mn x mn)`` conditioner acting on row-major ``vec(g.T X)``."""

    matrix: np.ndarray
    shape: tuple[int, int]
    vec_convention: str = "row-major vec of the d_out x d_in matrix"

    def apply(self, grad: np.ndarray) -> np.ndarray:
        return (self.matrix @ grad.reshape(-1)).reshape(self.shape)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh((self.matrix + self.matrix.T) / 2).min())

    def cholesky_probe(self, jitter: float = 1e-10) -> bool:
        """True when ``matrix + jitter * scale * I`` admits a Cholesky factor."""
        sym = (self.matrix + self.matrix.T) / 2
        scale = max(np.abs(np.diag(sym)).max(), 1e-300)
        try:
            np.linalg.cholesky(sym + jitter * scale * np.eye(sym.shape[0]))
        except np.linalg.LinAlgError:
            return False
        return True


def _factors(tape, lambda_g, lambda_x, curvature=None):
    b = tape.x.shape[0]
    gbar = tape.g_sampled if curvature is None else curvature
    m, n = tape.g.shape[1], tape.x.shape[1]
    left = gbar.T @ gbar / b + lambda_g * np.eye(m)
    right = tape.x.T @ tape.x / b + lambda_x * np.eye(n)
    return left, right


def dense_conditioner(tape, lambda_g: float, lambda_x: float, prefactor: bool = True,
                      curvature=None) -> DenseStepOracle:
    """``[lg lx] (G.T G/b + lg I)^-1 ⊗ (X.T X/b + lx I)^-1`` as an explicit matrix.

    ``lambda_g = lambda_x = 0`` with ``prefactor=False`` gives the
    unregularized Kronecker-factored inverse.
    """
    m, n = tape.g.shape[1], tape.x.shape[1]
    _guard(m * n)
    left, right = _factors(tape, lambda_g, lambda_x, curvature)
    mat = np.kron(np.linalg.inv(left), np.linalg.inv(right))
    if prefactor:
        mat = lambda_g * lambda_x * mat
    return DenseStepOracle(mat, (m, n))


def kfac_step_dense(tape, lambda_g: float, lambda_x: float, prefactor: bool = True, curvature=None) -> np.ndarray:
    """Dense-Kronecker reference for the conditioned direction (``g.T X`` orientation)."""
    oracle = dense_conditioner(tape, lambda_g, lambda_x, prefactor, curvature)
    return oracle.apply(tape.g.T @ tape.x)


def softmax_ce_hessian(logits_row) -> np.ndarray:
    """Hessian ``diag(p) - p p^T`` of softmax cross-entropy w.r.t. the logits."""
    z = np.asarray(logits_row, dtype=np.float64).ravel()
    p = np.exp(z - z.max())
    p /= p.sum()
    return np.diag(p) - np.outer(p, p)


def loss_hessian(output_row, loss: Loss) -> np.ndarray:
    if Loss(loss) is Loss.MSE:
        return np.eye(np.asarray(output_row).size)
    return softmax_ce_hessian(output_row)


def _output_jacobians(model, x_row):
    """Per-layer ``(input a_{i-1}, J_{z_i} f)`` for one sample, by explicit chain rule."""
    acts, pre = [x_row], []
    a = x_row
    for layer in model.layers:
        z = a @ layer.weight + (0 if layer.bias is None else layer.bias.ravel())
        pre.append(z)
        a = np.maximum(z, 0) if layer.activation is Activation.RELU else z
        acts.append(a)
    jac = [None] * len(model.layers)
    j = np.eye(model.layers[-1].d_out)  # J_{z_L} f, identity output activation
    for i in range(len(model.layers) - 1, -1, -1):
        jac[i] = j
        if i:
            prev = model.layers[i - 1]
            dphi = (pre[i - 1] > 0).astype(float) if prev.activation is Activation.RELU else np.ones_like(pre[i - 1])
            j = j @ model.layers[i].weight.T * dphi[None, :]
    return acts[:-1], jac


def ggn_block_dense(model, x, layer_index: int, loss: Loss) -> np.ndarray:
    """Exact GGN diagonal block of layer ``layer_index``, averaged over the batch.

    ``mean_n J_n^T H_n J_n`` with ``J_n = J_{z_i} f ⊗ a_{i-1}`` in the module's
    vec convention and ``H_n`` the exact loss Hessian at the output.
    """
    layer = model.layers[layer_index]
    _guard(layer.d_in * layer.d_out)
    model64 = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    out, _ = forward(model64, x)
    total = np.zeros((layer.d_in * layer.d_out,) * 2)
    for row, f_row in zip(x, out):
        acts, jac = _output_jacobians(model64, row)
        j_w = np.kron(jac[layer_index], acts[layer_index][None, :])
        total += j_w.T @ loss_hessian(f_row, loss) @ j_w
    return total / x.shape[0]


def kfac_gap(model, x, layer_index: int, loss: Loss) -> float:
    """Relative Frobenius gap between the exact GGN block and its Kronecker factorization."""
    layer = model.layers[layer_index]
    model64 = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    out, _ = forward(model64, x)
    b = x.shape[0]
    gg = np.zeros((layer.d_out, layer.d_out))
    aa = np.zeros((layer.d_in, layer.d_in))
    for row, f_row in zip(x, out):
        acts, jac = _output_jacobians(model64, row)
        gg += jac[layer_index].T @ loss_hessian(f_row, loss) @ jac[layer_index]
        aa += np.outer(acts[layer_index], acts[layer_index])
    exact = ggn_block_dense(model, x, layer_index, loss)
    approx = np.kron(gg / b, aa / b)
    return float(np.linalg.norm(exact - approx) / np.linalg.norm(exact))


def finite_diff_grad(model, x, target, loss: Loss, h: float = 1e-5, biases: bool = False):
    """Central-difference gradient of the batch-mean loss, per layer in weight layout.

    With ``biases`` also returns the bias gradients.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    probe = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)

    def value():
        return loss_and_metrics(forward(probe, x)[0], target, loss)[0]

    def diff(param):
        grad = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            saved = param[idx]
            param[idx] = saved + h
            up = value()
            param[idx] = saved - h
            down = value()
            param[idx] = saved
            grad[idx] = (up - down) / (2 * h)
        return grad

    weight_grads = [diff(layer.weight) for layer in probe.layers]
    if not biases:
        return weight_grads
    bias_grads = [None if layer.bias is None else diff(layer.bias) for layer in probe.layers]
    return weight_grads, bias_grads
