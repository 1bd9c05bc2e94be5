import numpy as np
import pytest

from isaac.conditioner import UpdateDirection
from isaac.nn import Activation, Layer, Loss, Mlp, backward, forward, weight_grads
from isaac.optim import LR_GRID, NonFiniteUpdateError, OptimKind, OptimState, apply_update, lr_grid


def _model():
    return Mlp([Layer(np.array([[1.0, -2.0], [0.5, 0.0]]), np.array([0.1, 0.2]), Activation.IDENTITY)])


def _direction(scale=1.0):
    return UpdateDirection([np.full((2, 2), scale)], [np.full((1, 2), -scale)])


def test_zero_lr_leaves_model():
    m = _model()
    before = m.copy()
    apply_update(m, _direction(), OptimState(OptimKind.SGD, lr=0.0))
    np.testing.assert_array_equal(m.layers[0].weight, before.layers[0].weight)
    np.testing.assert_array_equal(m.layers[0].bias, before.layers[0].bias)


def test_sgd_linear_regression_step():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((3, 2))
    m = Mlp([Layer(w.copy(), None, Activation.IDENTITY)])
    x, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    out, tapes = forward(m, x)
    backward(m, tapes, out, y, Loss.MSE)
    apply_update(m, UpdateDirection(weight_grads(tapes), [None]), OptimState(OptimKind.SGD, lr=0.1))
    np.testing.assert_allclose(m.layers[0].weight, w - 0.1 * x.T @ (x @ w - y) / 6, atol=1e-12)


def test_momentum_zero_beta_is_sgd():
    a, b = _model(), _model()
    sa, sb = OptimState(OptimKind.SGD, lr=0.3), OptimState(OptimKind.MOMENTUM, lr=0.3, momentum=0.0)
    for k in range(4):
        apply_update(a, _direction(k + 1), sa)
        apply_update(b, _direction(k + 1), sb)
    np.testing.assert_array_equal(a.layers[0].weight, b.layers[0].weight)
    np.testing.assert_array_equal(a.layers[0].bias, b.layers[0].bias)


def test_momentum_accumulates():
    m = _model()
    w0 = m.layers[0].weight.copy()
    s = OptimState(OptimKind.MOMENTUM, lr=1.0, momentum=0.5)
    apply_update(m, _direction(1.0), s)
    apply_update(m, _direction(1.0), s)
    # velocities 1 then 1.5
    np.testing.assert_allclose(m.layers[0].weight, w0 - 2.5, atol=1e-15)


def test_adam_hand_trace():
    m = _model()
    w = m.layers[0].weight[0, 0]
    s = OptimState(OptimKind.ADAM, lr=0.01, betas=(0.9, 0.999), eps=1e-8)
    mm = vv = 0.0
    for t, d in enumerate([1.0, -2.0, 0.5], start=1):
        apply_update(m, _direction(d), s)
        mm = 0.9 * mm + 0.1 * d
        vv = 0.999 * vv + 0.001 * d * d
        w -= 0.01 * (mm / (1 - 0.9 ** t)) / (np.sqrt(vv / (1 - 0.999 ** t)) + 1e-8)
    assert m.layers[0].weight[0, 0] == pytest.approx(w, abs=1e-10)
    assert s.buffer_bytes() > 0


def test_non_finite_direction_rejected_atomically():
    m = _model()
    before = m.copy()
    bad = UpdateDirection([np.array([[1.0, np.nan], [0.0, 0.0]])], [np.zeros((1, 2))])
    s = OptimState(OptimKind.MOMENTUM)
    with pytest.raises(NonFiniteUpdateError):
        apply_update(m, bad, s)
    np.testing.assert_array_equal(m.layers[0].weight, before.layers[0].weight)
    assert s.step == 0 and not s.buf1


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        apply_update(_model(), UpdateDirection([np.zeros((3, 2))], [np.zeros((1, 2))]), OptimState())


def test_lr_grid():
    grid = lr_grid()
    assert 0.3 in grid and len(grid) == 7
    assert grid == sorted(grid, reverse=True)
    assert tuple(grid) == LR_GRID


@pytest.mark.parametrize("kwargs", [dict(lr=-0.1), dict(momentum=1.0), dict(kind="lbfgs")])
def test_state_validation(kwargs):
    with pytest.raises(ValueError):
        OptimState(**kwargs)
