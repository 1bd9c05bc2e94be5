"""Curvature-conditioned update directions for dense layers.

All per-layer functions work in the ``d_out x d_in`` orientation of
``g.T @ X`` (the transpose of the weight layout) and take the tape's
per-sample ``g`` as is. :func:`condition_model` divides by the batch size and
transposes, handing the optimizer directions shaped like the weights.

Notation for one layer with batch ``b``, inputs ``X`` (b x n), output
gradients ``g`` (b x m) and curvature rows ``G`` (rb x m):

* gradient:  ``g.T X``
* ZETA_STAR: ``g.T (I_b + X X.T / (b lx))^-1 X``
* ZETA:      ``(I_m - G.T (I_rb + G G.T / (b lg))^-1 G / (b lg)) @ zeta_star``
* KFAC:      ``(G.T G / b + lg I)^-1 g.T X (X.T X / b + lx I)^-1``

``ZETA == lg * lx * KFAC``. The ZETA_STAR expression uses
``I - K (I + K)^-1 == (I + K)^-1`` for ``K = X X.T / (b lx)``, which needs a
single b x b solve and avoids the subtraction.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .linalg import SingularMatrixError, spd_factorize, spd_solve

log = logging.getLogger(__name__)


class Mode(str, Enum):
    GRADIENT = "gradient"
    KFAC = "kfac"
    ZETA = "zeta"
    ZETA_STAR = "zeta_star"


class CurvatureSource(str, Enum):
    SAMPLED_GGN = "sampled_ggn"
    EXACT_GGN = "exact_ggn"
    FISHER = "fisher"


class ConfigurationError(ValueError):
    pass


class ConditioningError(RuntimeError):
    """An SPD solve failed for a layer even after jitter escalation."""

    def __init__(self, message, *, lambda_g=None, lambda_x=None, batch_size=None,
                 dim=None, input_norm=None, layer=None):
        self.lambda_g = lambda_g
        self.lambda_x = lambda_x
        self.batch_size = batch_size
        self.dim = dim
        self.input_norm = input_norm
        self.layer = layer
        super().__init__(message)


@dataclass(frozen=True)
class ConditionerConfig:
    mode: Mode = Mode.ZETA_STAR
    curvature_source: CurvatureSource = CurvatureSource.SAMPLED_GGN
    lambda_g: float = math.inf
    lambda_x: float = 0.1
    r: int = 1
    layer_mask: Optional[tuple[bool, ...]] = None
    large_batch_switch: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "curvature_source", CurvatureSource(self.curvature_source))
        object.__setattr__(self, "lambda_g", float(self.lambda_g))
        object.__setattr__(self, "lambda_x", float(self.lambda_x))
        if self.layer_mask is not None:
            object.__setattr__(self, "layer_mask", tuple(bool(m) for m in self.layer_mask))
        if self.mode in (Mode.ZETA, Mode.KFAC) and not self.lambda_g > 0:
            raise ConfigurationError(f"{self.mode.value} needs lambda_g > 0")
        if self.mode is not Mode.GRADIENT and not self.lambda_x > 0:
            raise ConfigurationError(f"{self.mode.value} needs lambda_x > 0")
        if self.mode is Mode.KFAC and not (math.isfinite(self.lambda_g) and math.isfinite(self.lambda_x)):
            raise ConfigurationError("kfac needs finite lambda_g and lambda_x")
        if self.needs_curvature and self.curvature_source is CurvatureSource.SAMPLED_GGN and self.r < 1:
            raise ConfigurationError("r must be at least 1 for sampled curvature")

    @property
    def needs_curvature(self) -> bool:
        """Whether tapes must carry ``g_sampled`` for this config."""
        if self.curvature_source is CurvatureSource.FISHER:
            return False
        if self.mode is Mode.KFAC:
            return True
        return self.mode is Mode.ZETA and math.isfinite(self.lambda_g)

    def layer_enabled(self, index: int) -> bool:
        return self.layer_mask is None or self.layer_mask[index]


@dataclass
class UpdateDirection:
    """Per-layer directions in weight layout (``d_in x d_out``) plus bias gradients."""

    weights: list[np.ndarray]
    biases: list[Optional[np.ndarray]]
    fallback_layers: list[int] = field(default_factory=list)


def _batch_size(tape, b):
    rows = tape.x.shape[0]
    if b is None:
        return rows
    if b != rows:
        raise ConfigurationError(f"batch size {b} does not match tape with {rows} rows")
    return b


def _curvature_rows(tape, b, curvature):
    gbar = tape.g_sampled if curvature is None else curvature
    if gbar is None:
        raise ConfigurationError("tape has no curvature rows (run backward_sampled or backward_exact)")
    if gbar.shape[0] % b:
        raise ConfigurationError(f"curvature rows ({gbar.shape[0]}) are not a multiple of b={b}")
    return gbar


def _factor(a, **context):
    try:
        return spd_factorize(a)
    except SingularMatrixError as exc:
        raise ConditioningError(str(exc), dim=a.shape[0], **context) from exc


def gradient_direction(tape) -> np.ndarray:
    return tape.g.T @ tape.x


def zeta_star(tape, lambda_x: float, b: Optional[int] = None, large_batch_switch: bool = False) -> np.ndarray:
    """Input-only conditioned direction (the ``lambda_g -> inf`` limit of :func:`zeta`).

    With ``large_batch_switch`` and ``b > n`` the equal n x n form
    ``lx g.T X (X.T X / b + lx I)^-1`` is used instead of the b x b solve.
    """
    if not lambda_x > 0:
        raise ConfigurationError("lambda_x must be positive")
    g, x = tape.g, tape.x
    b = _batch_size(tape, b)
    if math.isinf(lambda_x):
        return g.T @ x
    n = x.shape[1]
    scale = x.dtype.type(1.0 / (b * lambda_x))
    context = dict(lambda_x=lambda_x, batch_size=b, input_norm=float(np.linalg.norm(x)))
    if large_batch_switch and b > n:
        a = x.T @ x * scale
        a[np.diag_indices(n)] += 1
        return spd_solve(_factor(a, **context), x.T @ g).T
    k = x @ x.T * scale
    k[np.diag_indices(b)] += 1
    return spd_solve(_factor(k, **context), g).T @ x


def _left_woodbury(gbar, a, lambda_g, b):
    c = b * lambda_g
    s = gbar @ gbar.T / c
    s[np.diag_indices(s.shape[0])] += 1
    f = _factor(s, lambda_g=lambda_g, batch_size=b)
    return a - gbar.T @ spd_solve(f, gbar @ a) / c


def zeta(tape, lambda_g: float, lambda_x: float, b: Optional[int] = None,
         large_batch_switch: bool = False, curvature: Optional[np.ndarray] = None) -> np.ndarray:
    """Two-parameter regularized Kronecker-factored Gauss-Newton direction.

    Evaluated in Woodbury form: one (rb x rb) solve for the curvature factor
    and one b x b solve for the input factor. An infinite ``lambda_g`` or
    ``lambda_x`` drops the corresponding factor exactly. ``curvature``
    overrides ``tape.g_sampled`` (pass ``tape.g`` for the empirical Fisher).
    """
    if not lambda_g > 0:
        raise ConfigurationError("lambda_g must be positive")
    b = _batch_size(tape, b)
    right = zeta_star(tape, lambda_x, b, large_batch_switch)
    if math.isinf(lambda_g):
        return right
    return _left_woodbury(_curvature_rows(tape, b, curvature), right, lambda_g, b)


def kfac_step(tape, lambda_g: float, lambda_x: float, b: Optional[int] = None,
              curvature: Optional[np.ndarray] = None) -> np.ndarray:
    """Explicit Kronecker-factored step ``(G.T G/b + lg I)^-1 g.T X (X.T X/b + lx I)^-1``.

    No ``lg * lx`` prefactor. Solves in the m x m and n x n factor spaces.
    """
    b = _batch_size(tape, b)
    gbar = _curvature_rows(tape, b, curvature)
    x = tape.x
    m, n = gbar.shape[1], x.shape[1]
    left = gbar.T @ gbar / b
    left[np.diag_indices(m)] += lambda_g
    right = x.T @ x / b
    right[np.diag_indices(n)] += lambda_x
    grad = tape.g.T @ x
    tmp = spd_solve(_factor(left, lambda_g=lambda_g, batch_size=b), grad)
    context = dict(lambda_x=lambda_x, batch_size=b, input_norm=float(np.linalg.norm(x)))
    return spd_solve(_factor(right, **context), tmp.T).T


def condition_layer(tape, cfg: ConditionerConfig) -> np.ndarray:
    """Direction for one layer in ``g.T X`` orientation, ignoring the mask."""
    curvature = tape.g if cfg.curvature_source is CurvatureSource.FISHER else None
    if cfg.mode is Mode.GRADIENT:
        return gradient_direction(tape)
    if cfg.mode is Mode.ZETA_STAR:
        return zeta_star(tape, cfg.lambda_x, large_batch_switch=cfg.large_batch_switch)
    if cfg.mode is Mode.ZETA:
        return zeta(tape, cfg.lambda_g, cfg.lambda_x, large_batch_switch=cfg.large_batch_switch,
                    curvature=curvature)
    return cfg.lambda_g * cfg.lambda_x * kfac_step(tape, cfg.lambda_g, cfg.lambda_x, curvature=curvature)


def condition_model(model, tapes: Sequence, cfg: ConditionerConfig) -> UpdateDirection:
    """Per-layer update directions according to ``cfg``.

    Masked-out layers get the plain gradient. Every direction is scaled to the
    batch-mean loss (divided by ``b``) and returned in weight layout. Biases
    always receive their plain gradient. A layer whose solve fails falls back
    to the gradient and is listed in ``fallback_layers``.
    """
    if cfg.layer_mask is not None and len(cfg.layer_mask) != len(model.layers):
        raise ConfigurationError(
            f"layer mask has {len(cfg.layer_mask)} entries for {len(model.layers)} layers"
        )
    weights, biases, fallbacks = [], [], []
    for i, (tape, layer) in enumerate(zip(tapes, model.layers)):
        b = tape.batch_size
        if cfg.layer_enabled(i):
            try:
                z = condition_layer(tape, cfg)
            except ConditioningError as exc:
                exc.layer = i
                log.warning("layer %d: %s; falling back to the gradient", i, exc)
                fallbacks.append(i)
                z = gradient_direction(tape)
            except ConfigurationError as exc:
                raise ConfigurationError(f"layer {i}: {exc}") from exc
        else:
            z = gradient_direction(tape)
        weights.append(z.T / b)
        biases.append(None if layer.bias is None else tape.g.sum(axis=0, keepdims=True) / b)
    return UpdateDirection(weights, biases, fallbacks)
