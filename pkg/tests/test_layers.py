import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from thama import layers
from thama.errors import ShapeError
from thama.layers import Conv1DLayer, DenseLayer, DropoutSpec, ParamInfo


def identity_conv(channels):
    k = np.zeros((channels, channels, 3))
    for c in range(channels):
        k[c, c, 1] = 1.0
    return Conv1DLayer(k, np.zeros(channels))


def test_conv_identity_kernel():
    x = np.array([[1.0, -2.0, 3.0, 0.5]])
    np.testing.assert_array_equal(layers.conv1d(x, identity_conv(1)), x)


def test_conv_box_kernel():
    out = layers.conv1d(np.array([[1.0, 2.0, 3.0]]), Conv1DLayer(np.ones((1, 1, 3)), np.zeros(1)))
    np.testing.assert_array_equal(out, [[3.0, 6.0, 5.0]])


def test_conv_bias_broadcast():
    out = layers.conv1d(np.zeros((2, 5)), Conv1DLayer(np.ones((3, 2, 3)), np.array([1.0, -2.0, 0.5])))
    np.testing.assert_array_equal(out, np.repeat([[1.0], [-2.0], [0.5]], 5, axis=1))


def test_conv_matches_sliding_window_oracle(rng):
    x = rng.standard_normal((2, 7))
    layer = Conv1DLayer(rng.standard_normal((3, 2, 3)), rng.standard_normal(3))
    xp = np.pad(x, ((0, 0), (1, 1)))
    expected = np.zeros((3, 7))
    for o in range(3):
        for pos in range(7):
            expected[o, pos] = layer.bias[o] + sum(
                layer.kernels[o, c, k] * xp[c, pos + k] for c in range(2) for k in range(3)
            )
    np.testing.assert_allclose(layers.conv1d(x, layer), expected, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        layers.conv1d(np.zeros((2, 4)), identity_conv(3))


def test_conv_kernel_width_is_three():
    with pytest.raises(ShapeError):
        Conv1DLayer(np.zeros((1, 1, 5)), np.zeros(1))


@given(
    st.integers(1, 4).flatmap(
        lambda c: arrays(np.float64, (c, 9), elements=st.floats(-1e3, 1e3, allow_nan=False))
    )
)
def test_conv_identity_property(x):
    np.testing.assert_array_equal(layers.conv1d(x, identity_conv(x.shape[0])), x)


def test_maxpool_examples():
    np.testing.assert_array_equal(layers.maxpool1d(np.array([1, 3, 2, 5])), [3, 5])
    np.testing.assert_array_equal(layers.maxpool1d(np.array([1, 3, 2])), [3])
    with pytest.raises(ShapeError):
        layers.maxpool1d(np.array([1.0]))


def test_maxpool_per_channel(rng):
    x = rng.standard_normal((2, 8))
    expected = np.array([[max(x[c, 2 * i], x[c, 2 * i + 1]) for i in range(4)] for c in range(2)])
    np.testing.assert_array_equal(layers.maxpool1d(x), expected)


@given(st.integers(2, 200))
def test_maxpool_length(n):
    assert layers.maxpool1d(np.zeros(n)).shape == (n // 2,)


def test_dense_examples():
    x = np.array([1.0, 0.0, -1.0])
    np.testing.assert_array_equal(layers.dense(x, DenseLayer(np.eye(3), np.zeros(3))), x)
    np.testing.assert_array_equal(layers.dense(x, DenseLayer(np.zeros((3, 2)), np.array([1.0, 2.0]))), [1, 2])
    W = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    # W^T x + b = [1 - 5, 2 - 6] + [0.5, -0.5]
    np.testing.assert_array_equal(layers.dense(x, DenseLayer(W, np.array([0.5, -0.5]))), [-3.5, -4.5])
    with pytest.raises(ShapeError):
        layers.dense(np.ones(2), DenseLayer(W, np.zeros(2)))


def test_dropout_identity_cases(rng):
    x = rng.standard_normal(100)
    assert np.array_equal(layers.dropout(x, DropoutSpec(0.7, "inference"), rng), x)
    assert np.array_equal(layers.dropout(x, DropoutSpec(0.0, "training"), rng), x)


def test_dropout_preserves_expectation(rng):
    out = layers.dropout(np.ones(100_000), DropoutSpec(0.3, "training"), rng)
    assert abs(out.mean() - 1.0) < 0.01
    np.testing.assert_allclose(np.unique(out), [0.0, 1 / 0.7])


def test_dropout_rate_bound():
    with pytest.raises(ValueError):
        DropoutSpec(1.0)


def test_bce_examples():
    assert layers.bce(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert layers.bce(0.5, 0) == pytest.approx(0.693147, abs=1e-6)
    assert layers.bce(1 - 1e-7, 1) == pytest.approx(1e-7, rel=1e-3)
    assert layers.bce([0.9, 0.2], [1, 0]) == pytest.approx(0.164252, abs=1e-6)
    assert layers.bce([1.0, 0.0], [1, 0]) == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)


@given(st.floats(0, 1), st.sampled_from([0, 1]))
def test_bce_nonnegative(p, y):
    assert layers.bce(p, y) > 0


def test_init_deterministic_and_bounds():
    layout = {
        "w": ParamInfo((128, 64), "he", 128, 64),
        "b": ParamInfo((64,), "zeros"),
        "g": ParamInfo((64, 1), "glorot", 64, 1),
    }
    a = layers.init_parameters(layout, seed=7)
    b = layers.init_parameters(layout, seed=7)
    assert all(a[k].tobytes() == b[k].tobytes() for k in layout)
    assert layers.he_bound(128) == pytest.approx(math.sqrt(6 / 128))
    assert np.abs(a["w"]).max() <= math.sqrt(6 / 128)
    assert np.abs(a["g"]).max() <= math.sqrt(6 / 65)
    assert not a["b"].any()


def test_he_variance():
    fan_in = 50
    draws = layers.init_parameters({"w": ParamInfo((1_000_000,), "he", fan_in, 1)}, seed=3, dtype=np.float64)["w"]
    assert abs(draws.var() / (2 / fan_in) - 1) < 0.05
