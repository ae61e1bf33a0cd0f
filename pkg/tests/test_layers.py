"""Layer forward/backward behavior: shape handling, analytic values, and
finite-difference gradient agreement."""

import zlib

import numpy as np
import pytest

from graftnet import layers
from graftnet.tensor import Tensor, backward
from helpers import GRAD_CHECK_LAYERS, layer_grad_check, weighted_sum


@pytest.mark.parametrize("layer", GRAD_CHECK_LAYERS)
def test_gradients_match_finite_differences(layer):
    rng = np.random.default_rng(zlib.crc32(layer.encode()))
    for point in range(2):
        err = layer_grad_check(layer, rng)
        assert err < 1e-4, f"{layer} point {point}: rel err {err:.3e}"


def test_conv2d_matches_direct_convolution():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (1, 2, 5, 5))
    w = rng.normal(0, 1, (3, 2, 3, 3))
    b = rng.normal(0, 1, (3,))
    out = layers.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                expected[0, o, i, j] = (xp[0, :, i : i + 3, j : j + 3] * w[o]).sum() + b[o]
    assert np.allclose(out, expected, atol=1e-12)


def test_conv2d_stride_two_output_shape():
    x = Tensor(np.zeros((2, 3, 9, 9)))
    w = Tensor(np.zeros((4, 3, 3, 3)))
    b = Tensor(np.zeros(4))
    assert layers.conv2d(x, w, b, stride=2, padding=1).shape == (2, 4, 5, 5)


def test_conv2d_shape_mismatch_names_both_shapes():
    x = Tensor(np.zeros((1, 3, 5, 5)))
    w = Tensor(np.zeros((4, 2, 3, 3)))
    with pytest.raises(ValueError, match=r"(?s)3.*2|2.*3"):
        layers.conv2d(x, w, Tensor(np.zeros(4)))


def test_batch_norm_train_normalizes_batch():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, (8, 2, 4, 4))
    state = layers.BatchNormState(2, name="bn", dtype=np.float64)
    out = layers.batch_norm(Tensor(x), state, mode="train").data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    assert np.allclose(out.std(axis=(0, 2, 3)), 1, atol=1e-3)


def test_batch_norm_running_stats_ema():
    x = np.ones((2, 1, 2, 2), dtype=np.float64) * 4.0
    state = layers.BatchNormState(1, name="bn", momentum=0.1, dtype=np.float64)
    layers.batch_norm(Tensor(x), state, mode="train")
    # new = 0.9 * old + 0.1 * batch; old mean 0, old var 1, batch mean 4, var 0
    assert np.allclose(state.running_mean, [0.4])
    assert np.allclose(state.running_var, [0.9])


def test_batch_norm_infer_does_not_touch_running_stats():
    state = layers.BatchNormState(1, name="bn", dtype=np.float64)
    state.running_mean = np.array([1.0])
    state.running_var = np.array([4.0])
    x = np.full((1, 1, 2, 2), 3.0)
    out = layers.batch_norm(Tensor(x), state, mode="infer").data
    assert np.allclose(out, (3.0 - 1.0) / np.sqrt(4.0 + state.epsilon))
    assert state.running_mean[0] == 1.0 and state.running_var[0] == 4.0


def test_batch_norm_stats_frozen_uses_running_stats_in_train_mode():
    state = layers.BatchNormState(1, name="bn", dtype=np.float64)
    state.running_mean = np.array([2.0])
    state.running_var = np.array([1.0])
    state.stats_frozen = True
    x = np.full((4, 1, 2, 2), 10.0)
    out = layers.batch_norm(Tensor(x), state, mode="train").data
    assert np.allclose(out, (10.0 - 2.0) / np.sqrt(1.0 + state.epsilon))
    assert state.running_mean[0] == 2.0


def test_biased_batch_variance():
    x = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
    state = layers.BatchNormState(1, name="bn", momentum=0.5, dtype=np.float64)
    layers.batch_norm(Tensor(x), state, mode="train")
    # biased variance of {0, 2} is 1.0; running var = 0.5*1 + 0.5*1
    assert np.allclose(state.running_var, [1.0])


def test_relu_zeroes_negatives_and_their_gradient():
    x = Tensor(np.array([[-2.0, 3.0]]), requires_grad=True)
    out = layers.relu(x)
    assert np.array_equal(out.data, [[0.0, 3.0]])
    backward(weighted_sum(out, np.ones((1, 2))))
    assert np.array_equal(x.grad, [[0.0, 1.0]])


def test_global_avg_pool_value():
    x = np.arange(24, dtype=np.float64).reshape(1, 2, 3, 4)
    out = layers.global_avg_pool(Tensor(x)).data
    assert np.allclose(out, x.mean(axis=(2, 3)))


def test_bilinear_pool_is_unit_norm_and_matches_outer_product():
    rng = np.random.default_rng(2)
    x = rng.normal(0.5, 1.0, (2, 3, 4, 4))
    out = layers.bilinear_pool(Tensor(x)).data
    assert out.shape == (2, 9)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)
    z = np.einsum("nchw,ndhw->ncd", x, x) / 16.0
    ref = np.sign(z) * np.sqrt(np.abs(z))
    ref = ref.reshape(2, 9)
    ref /= np.linalg.norm(ref, axis=1, keepdims=True)
    assert np.allclose(out, ref, atol=1e-10)


def test_bilinear_pool_zero_input_stays_finite():
    out = layers.bilinear_pool(Tensor(np.zeros((1, 2, 3, 3)))).data
    assert np.all(np.isfinite(out))
    assert np.allclose(out, 0.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    probs = layers.softmax(rng.normal(0, 5, (6, 3)))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert probs.min() >= 0


def test_cross_entropy_uniform_logits_is_log_k():
    logits = Tensor(np.zeros((5, 2)))
    loss = layers.softmax_cross_entropy(logits, np.array([0, 1, 0, 1, 0]))
    assert np.allclose(float(loss.data), np.log(2.0), atol=1e-12)
    logits3 = Tensor(np.zeros((4, 3)))
    loss3 = layers.softmax_cross_entropy(logits3, np.array([0, 1, 2, 0]))
    assert np.allclose(float(loss3.data), np.log(3.0), atol=1e-12)


def test_cross_entropy_rejects_bad_labels():
    logits = Tensor(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        layers.softmax_cross_entropy(logits, np.array([0, 2]))
    with pytest.raises(ValueError):
        layers.softmax_cross_entropy(logits, np.array([-1, 0]))


def test_layers_reject_non_finite_input():
    bad = np.full((1, 2, 3, 3), np.nan)
    with pytest.raises(ValueError, match="finite"):
        layers.relu(Tensor(np.array([np.inf])))
    with pytest.raises(ValueError, match="finite"):
        layers.global_avg_pool(Tensor(bad))


def test_he_uniform_bounds_and_determinism():
    rng = np.random.default_rng(7)
    w1 = layers.he_uniform(rng, (64, 32), fan_in=32)
    limit = np.sqrt(6.0 / 32)
    assert np.abs(w1).max() <= limit
    w2 = layers.he_uniform(np.random.default_rng(7), (64, 32), fan_in=32)
    assert np.array_equal(w1, w2)
    assert w1.dtype == np.float32
