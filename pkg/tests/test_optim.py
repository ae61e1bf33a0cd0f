"""SGD with momentum: update math and velocity isolation."""

import numpy as np
import pytest

from graftnet.optim import SGD, sgd_step
from graftnet.tensor import Parameter


def _param(name, value, grad):
    p = Parameter(np.array(value, dtype=np.float64), name=name)
    p.accumulate_grad(np.array(grad, dtype=np.float64))
    return p


def test_vanilla_sgd_step():
    p = _param("w", [1.0, 2.0], [0.5, -0.5])
    SGD(lr=0.1).step([p])
    assert np.allclose(p.data, [0.95, 2.05])


def test_momentum_accumulates_velocity():
    p = _param("w", [0.0], [1.0])
    opt = SGD(lr=1.0, momentum=0.5)
    opt.step([p])  # v=1, w=-1
    p.zero_grad()
    p.accumulate_grad(np.array([1.0]))
    opt.step([p])  # v=1.5, w=-2.5
    assert np.allclose(p.data, [-2.5])


def test_velocity_keyed_by_name_survives_param_rotation():
    # the same logical parameter passed as different objects keeps its velocity
    opt = SGD(lr=1.0, momentum=0.5)
    p1 = _param("shared", [0.0], [1.0])
    opt.step([p1])
    p2 = Parameter(p1.data.copy(), name="shared")
    p2.accumulate_grad(np.array([0.0]))
    opt.step([p2])  # velocity 0.5 carries over despite zero grad
    assert np.allclose(p2.data, [-1.5])


def test_step_skips_frozen_params():
    p = _param("w", [1.0], [1.0])
    p.trainable = False
    opt = SGD(lr=0.1, momentum=0.9)
    opt.step([p])
    assert np.allclose(p.data, [1.0])
    assert "w" not in opt._velocity


def test_step_only_touches_given_params():
    a = _param("a", [1.0], [1.0])
    b = _param("b", [1.0], [1.0])
    SGD(lr=0.1).step([a])
    assert np.allclose(a.data, [0.9])
    assert np.allclose(b.data, [1.0])


def test_zero_grad_clears():
    p = _param("w", [1.0], [1.0])
    SGD(lr=0.1).zero_grad([p])
    assert p.grad is None


def test_functional_wrapper_matches_class():
    p1 = _param("w", [2.0], [1.0])
    p2 = _param("w", [2.0], [1.0])
    opt = SGD(lr=0.2, momentum=0.3)
    opt.step([p1])
    vel = sgd_step([p2], learning_rate=0.2, momentum=0.3)
    assert np.allclose(p1.data, p2.data)
    assert np.allclose(vel["w"], opt._velocity["w"])


def test_invalid_hyperparameters_rejected():
    with pytest.raises(ValueError):
        SGD(lr=-0.1)
    with pytest.raises(ValueError):
        SGD(lr=0.1, momentum=1.5)
