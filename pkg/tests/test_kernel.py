import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intakesim.kernel import (MLP, AdamState, DenseLayer, NumericFault, ShapeError, adam_step,
                              dense_forward, grad_check, layer_norm, make_rng, polyak_update,
                              sigmoid, silu, silu_grad)


def sq_loss(out):
    return 0.5 * float(np.sum(out ** 2)), out


def test_dense_identity_and_zero_weights():
    assert np.allclose(dense_forward(DenseLayer(np.eye(2), np.zeros(2)), [1.0, 2.0]), [1.0, 2.0])
    zero = DenseLayer(np.zeros((2, 4)), np.array([3.0, 3.0]))
    assert np.allclose(dense_forward(zero, [9.0, -1.0, 2.0, 0.5]), [3.0, 3.0])


def test_dense_matches_hand_dot_products():
    rng = make_rng(3, "dense")
    W, b = rng.normal(size=(3, 2)), rng.normal(size=3)
    y = dense_forward(DenseLayer(W, b), [1.0, 1.0])
    hand = [W[i, 0] * 1.0 + W[i, 1] * 1.0 + b[i] for i in range(3)]
    assert np.allclose(y, hand, rtol=0, atol=1e-14)


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        dense_forward(DenseLayer(np.eye(2), np.zeros(2)), [1.0, 2.0, 3.0])
    with pytest.raises(ShapeError):
        DenseLayer(np.eye(2), np.zeros(3))


def test_layer_norm_cases():
    assert np.allclose(layer_norm(np.full(6, 4.2), 1.0, 0.0), 0.0)
    # var of (1,-1) is 1, so the eps correction is 1/sqrt(1+eps)
    eps = 1e-5
    assert np.allclose(layer_norm([1.0, -1.0], 1.0, 0.0, eps), np.array([1.0, -1.0]) / np.sqrt(1 + eps))
    assert np.allclose(layer_norm([3.0, -8.0, 1.0], 0.0, np.full(3, 5.0)), 5.0)
    with pytest.raises(ShapeError):
        layer_norm([1.0], 1.0, 0.0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=20))
def test_layer_norm_standardizes(xs):
    x = np.array(xs)
    y = layer_norm(x, 1.0, 0.0, eps=1e-12)
    if x.std() > 1e-3:
        assert abs(y.mean()) < 1e-9
        assert abs(y.var() - 1.0) < 1e-6


def test_activations():
    assert silu(0.0) == 0.0
    assert sigmoid(0.0) == 0.5
    h = 1e-5
    fd = (silu(1.0 + h) - silu(1.0 - h)) / (2 * h)
    assert abs(silu_grad(1.0) - fd) < 1e-6


@given(st.floats(-700, 700))
def test_sigmoid_open_interval_and_silu_identity(x):
    s = float(sigmoid(x))
    assert 0.0 <= s <= 1.0
    assert silu(x) == pytest.approx(x * s, rel=1e-12, abs=1e-300)
    if abs(x) < 30:
        assert 0.0 < s < 1.0


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    st_ = AdamState()
    adam_step(p, {"w": np.array([0.5, 0.5])}, st_)
    before = p["w"].copy()
    m_before = st_.m["w"].copy()
    adam_step(p, {"w": np.zeros(2)}, st_)
    # the decayed first moment still moves params; what must hold is m *= beta1
    assert np.allclose(st_.m["w"], 0.9 * m_before)
    fresh = {"w": np.array([1.0, -2.0])}
    adam_step(fresh, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(fresh["w"], [1.0, -2.0])
    assert not np.array_equal(before, p["w"])


def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    g = np.array([3.0, -0.01, 250.0])
    adam_step(p, {"w": g}, AdamState(lr=1e-3))
    assert np.allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_two_steps_match_scalar_recursion():
    lr, b1, b2, eps = 3e-4, 0.9, 0.999, 1e-8
    g = 0.7
    p = {"w": np.array([1.0])}
    state = AdamState(lr=lr)
    adam_step(p, {"w": np.array([g])}, state)
    adam_step(p, {"w": np.array([g])}, state)
    m = v = 0.0
    x = 1.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert state.step == 2
    assert state.m["w"][0] == pytest.approx(m, abs=1e-15)
    assert state.v["w"][0] == pytest.approx(v, abs=1e-15)
    assert p["w"][0] == pytest.approx(x, abs=1e-15)


def test_adam_rejects_nan_without_touching_state():
    p = {"a": np.ones(2), "b": np.ones(2)}
    state = AdamState()
    with pytest.raises(NumericFault):
        adam_step(p, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state)
    assert state.step == 0 and not state.m
    assert np.array_equal(p["a"], np.ones(2))


def test_grad_check_linear_net_exact():
    net = MLP([("dense", 4, 3)], make_rng(0, "lin"))
    x = make_rng(1, "x").normal(size=(5, 4))
    assert grad_check(net, sq_loss, x) < 1e-8


@pytest.mark.parametrize("arch", [
    [("dense", 4, 6), ("silu",), ("dense", 6, 2)],
    [("dense", 5, 7), ("layernorm", 7), ("silu",), ("dense", 7, 3), ("sigmoid",)],
])
def test_grad_check_nonlinear(arch):
    net = MLP(arch, make_rng(2, "nl"))
    x = make_rng(3, "x").normal(size=(4, arch[0][1]))
    assert grad_check(net, sq_loss, x) < 1e-4


def test_grad_check_raises_on_wrong_gradient():
    net = MLP([("dense", 3, 2)], make_rng(0))
    x = np.ones((2, 3))
    with pytest.raises(AssertionError):
        grad_check(net, lambda out: (float(np.sum(out ** 2)), out), x, tolerance=1e-4)


def test_input_gradient_matches_finite_difference():
    net = MLP([("dense", 3, 5), ("layernorm", 5), ("silu",), ("dense", 5, 1)], make_rng(4))
    x = make_rng(5).normal(size=3)
    out, cache = net.forward(x)
    _, dx = net.backward(cache, np.ones(1), need_params=False)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (net(x + e)[0] - net(x - e)[0]) / (2 * h)
        assert abs(dx[i] - fd) < 1e-7


def test_rng_streams():
    a = make_rng(7, "episode", 3).random(5)
    assert np.array_equal(a, make_rng(7, "episode", 3).random(5))
    assert not np.array_equal(a, make_rng(7, "episode", 4).random(5))
    assert not np.array_equal(a, make_rng(8, "episode", 3).random(5))
    with pytest.raises(ValueError):
        make_rng(0, -1)


def test_polyak_contraction():
    rng = make_rng(0, "polyak")
    online = {"w": rng.normal(size=(3, 3))}
    target = {"w": rng.normal(size=(3, 3))}
    before = np.linalg.norm(target["w"] - online["w"])
    polyak_update(target, online, 0.005)
    assert np.linalg.norm(target["w"] - online["w"]) == pytest.approx(0.995 * before, rel=1e-12)
    frozen = {"w": target["w"].copy()}
    polyak_update(target, online, 0.0)
    assert np.array_equal(frozen["w"], target["w"])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zero_last_layer_gives_zero_output(seed):
    net = MLP([("dense", 4, 8), ("silu",), ("dense", 8, 2)], make_rng(seed), zero_last=True)
    assert np.array_equal(net(np.ones(4)), np.zeros(2))
