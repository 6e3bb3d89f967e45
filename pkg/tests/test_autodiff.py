import numpy as np
import pytest

from thama.autodiff import ComputeGraph, grad_check
from thama.errors import NonFiniteError, NumericalError, ShapeError


def test_add_forward():
    g = ComputeGraph()
    x = g.input("x", (2,), batched=False)
    y = g.input("y", (2,), batched=False)
    s = g.add(x, y, name="s")
    ev = g.forward({"x": [1, 2], "y": [3, 4]})
    np.testing.assert_array_equal(ev[s], [4, 6])


def test_matmul_identity():
    g = ComputeGraph()
    eye = g.param("I", np.eye(2))
    v = g.input("v", (2,), batched=False)
    out = g.matmul(eye, v)
    np.testing.assert_array_equal(g.forward({"v": [5, 7]})[out], [5, 7])


def test_relu_of_matvec():
    g = ComputeGraph()
    W = g.param("W", [[1, -1], [2, 0]])
    x = g.input("x", (2,), batched=False)
    out = g.relu(g.matmul(W, x))
    # W x = [3 - 1, 6] = [2, 6]
    np.testing.assert_array_equal(g.forward({"x": [3, 1]})[out], [2, 6])


def test_square_gradient():
    g = ComputeGraph(dtype=np.float64)
    x = g.param("x", [3.0])
    loss = g.reduce_mean(g.mul(x, x))
    grads = g.backward(g.forward({}), loss)
    assert grads["x"][0] == pytest.approx(6.0)


def test_sigmoid_gradient_at_zero():
    g = ComputeGraph(dtype=np.float64)
    x = g.param("x", [0.0])
    loss = g.reduce_mean(g.sigmoid(x))
    grads = g.backward(g.forward({}), loss)
    assert grads["x"][0] == pytest.approx(0.25)


def test_unbound_leaf():
    g = ComputeGraph()
    x = g.input("x", (2,))
    g.relu(x)
    with pytest.raises(KeyError, match="not bound"):
        g.forward({})


def test_shape_mismatch_at_bind_and_build():
    g = ComputeGraph()
    x = g.input("x", (3,))
    w = g.param("w", np.ones((4, 2)))
    with pytest.raises(ShapeError):
        g.matmul(x, w)
    with pytest.raises(ShapeError):
        g.forward({"x": np.ones((2, 4))})


def test_nonfinite_names_node():
    g = ComputeGraph()
    x = g.input("x", (1,))
    w = g.param("w", [1e20])
    g.mul(g.mul(x, w, name="fine"), w, name="blowup")
    with pytest.raises(NonFiniteError) as info:
        g.forward({"x": [[1e10]]})
    assert info.value.node == "blowup"


def test_backward_requires_scalar_and_evaluation():
    g = ComputeGraph()
    x = g.input("x", (2,))
    w = g.param("w", [1.0, 1.0])
    y = g.mul(x, w)
    loss = g.reduce_mean(y)
    with pytest.raises(ValueError, match="not been evaluated"):
        g.backward(None, loss)
    ev = g.forward({"x": np.ones((3, 2))})
    with pytest.raises(ShapeError):
        g.backward(ev, y)


def test_forward_is_pure_and_deterministic(rng):
    g = ComputeGraph()
    x = g.input("x", (5,))
    w = g.param("w", rng.standard_normal((5, 3)))
    before = g.params["w"].copy()
    out = g.sigmoid(g.matmul(x, w))
    data = rng.standard_normal((4, 5))
    a = g.forward({"x": data})[out]
    b = g.forward({"x": data})[out]
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(g.params["w"], before)


def test_gradient_keys_are_reachable_params(rng):
    g = ComputeGraph(dtype=np.float64)
    x = g.input("x", (3,))
    used = g.param("used", rng.standard_normal((3, 2)))
    g.param("unused", rng.standard_normal(4))
    loss = g.reduce_mean(g.matmul(x, used))
    grads = g.backward(g.forward({"x": rng.standard_normal((2, 3))}), loss)
    assert set(grads) == {"used"}
    assert grads["used"].shape == (3, 2)


def test_einsum_rejects_self_summed_index():
    g = ComputeGraph()
    a = g.param("a", np.ones((2, 3)))
    with pytest.raises(ShapeError):
        g.einsum("ij->i", a)


def _linear_graph(rng):
    g = ComputeGraph(dtype=np.float64)
    x = g.input("x", (4,))
    w = g.param("w", rng.standard_normal((4, 3)))
    b = g.param("b", rng.standard_normal(3))
    loss = g.reduce_mean(g.add(g.matmul(x, w), b))
    return g, loss, {"x": rng.standard_normal((5, 4))}


def test_grad_check_linear_graph_is_exact(rng):
    g, loss, bindings = _linear_graph(rng)
    assert grad_check(g, loss, bindings, 1e-5) < 1e-9


def test_grad_check_detects_injected_fault(rng):
    g = ComputeGraph(dtype=np.float64)
    x = g.input("x", (4,))
    w = g.param("w", rng.standard_normal((4, 3)))
    loss = g.reduce_mean(g.sigmoid(g.matmul(x, w)))
    bindings = {"x": rng.standard_normal((5, 4))}
    grads = g.backward(g.forward(bindings), loss)
    assert grad_check(g, loss, bindings) < 1e-5
    grads["w"] = grads["w"] * 1.1
    assert grad_check(g, loss, bindings, analytic=grads) > 1e-2


def test_grad_check_rejects_bad_epsilon_and_precision(rng):
    g, loss, bindings = _linear_graph(rng)
    with pytest.raises(ValueError):
        grad_check(g, loss, bindings, epsilon=0)
    g32 = ComputeGraph()
    x = g32.input("x", (1,))
    w = g32.param("w", [1.0])
    loss32 = g32.reduce_mean(g32.mul(x, w))
    with pytest.raises(NumericalError):
        grad_check(g32, loss32, {"x": [[1.0]]})


def test_sum_rule(rng):
    g = ComputeGraph(dtype=np.float64)
    x = g.input("x", (4,))
    w = g.param("w", rng.standard_normal((4, 3)))
    h = g.matmul(x, w)
    f = g.reduce_mean(g.sigmoid(h))
    q = g.reduce_mean(g.mul(h, h))
    total = g.add(f, q)
    ev = g.forward({"x": rng.standard_normal((6, 4))})
    gf, gq, gt = g.backward(ev, f), g.backward(ev, q), g.backward(ev, total)
    np.testing.assert_allclose(gt["w"], gf["w"] + gq["w"], rtol=0, atol=1e-10)


def test_dropout_masks_are_reused_when_fixed(rng):
    g = ComputeGraph(dtype=np.float64)
    x = g.input("x", (50,))
    w = g.param("w", np.ones(50))
    d = g.dropout(g.mul(x, w), 0.5, name="drop")
    loss = g.reduce_mean(d)
    bindings = {"x": rng.standard_normal((3, 50))}
    ev = g.forward(bindings, training=True, rng=np.random.default_rng(0))
    again = g.forward(bindings, training=True, masks=ev.masks)
    assert np.array_equal(ev[d], again[d])
    assert grad_check(g, loss, bindings, training=True, rng=np.random.default_rng(0)) < 1e-7
