import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from daca.tensor import (AdamState, Mlp, NonFiniteError, ShapeError, adam_step, finite_diff_check,
                         mlp_backward, mlp_forward, reverse_gradient, sigmoid)


def identity_layer(n):
    return Mlp([np.eye(n)], [np.zeros(n)], output="identity")


def test_forward_identity_layer():
    out, _ = mlp_forward(identity_layer(2), np.array([1.5, -2.0]))
    assert np.array_equal(out, [1.5, -2.0])


def test_forward_scaled_layer_with_bias():
    net = Mlp([np.array([[2.0, 0.0], [0.0, 2.0]])], [np.array([1.0, 1.0])])
    out, _ = mlp_forward(net, np.array([1.0, 1.0]))
    assert np.array_equal(out, [3.0, 3.0])


def test_relu_hidden_zeroes_negative_preactivations():
    # identity first layer feeding a relu: pre-activation (-5, 3)
    net = Mlp([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)], activation="relu")
    _, cache = mlp_forward(net, np.array([-5.0, 3.0]))
    assert np.array_equal(cache.acts[0][0], [0.0, 3.0])


def test_forward_rejects_wrong_input_dim():
    with pytest.raises(ShapeError):
        mlp_forward(identity_layer(2), np.ones(3))


def test_layers_must_chain():
    with pytest.raises(ShapeError):
        Mlp([np.ones((2, 3)), np.ones((4, 1))], [np.zeros(3), np.zeros(1)])


def test_batch_and_single_row_agree():
    net = Mlp.init([3, 5, 2], np.random.default_rng(0), activation="tanh")
    X = np.random.default_rng(1).normal(size=(4, 3))
    batch, _ = mlp_forward(net, X)
    for i in range(4):
        row, _ = mlp_forward(net, X[i])
        assert np.allclose(row, batch[i], rtol=0, atol=1e-15)


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(math.log(3.0)) == pytest.approx(0.75, abs=1e-15)
    assert sigmoid(800.0) == 1.0
    assert sigmoid(-800.0) == 0.0  # underflows but never NaN


@given(st.floats(-700, 700))
def test_sigmoid_symmetry(z):
    assert abs(sigmoid(z) + sigmoid(-z) - 1.0) <= 1e-12


def test_sigmoid_monotone():
    z = np.linspace(-30, 30, 1001)
    assert np.all(np.diff(sigmoid(z)) >= 0)


def test_backward_identity_passes_upstream():
    net = identity_layer(3)
    _, cache = mlp_forward(net, np.array([1.0, 2.0, 3.0]))
    g = np.array([0.5, -1.0, 2.0])
    _, gin = mlp_backward(net, cache, g)
    assert np.array_equal(gin, g)


def test_backward_zero_upstream_gives_zero_grads():
    net = Mlp.init([3, 4, 2], np.random.default_rng(0))
    X = np.random.default_rng(1).normal(size=(5, 3))
    _, cache = mlp_forward(net, X)
    grads, gin = mlp_backward(net, cache, np.zeros((5, 2)))
    assert all(not g.any() for g in grads) and not gin.any()


def test_backward_rejects_foreign_cache():
    a = Mlp.init([2, 2], np.random.default_rng(0))
    b = a.copy()
    _, cache = mlp_forward(a, np.ones(2))
    with pytest.raises(ShapeError):
        mlp_backward(b, cache, np.ones(2))


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_backward_matches_finite_differences(act):
    rng = np.random.default_rng(3)
    net = Mlp.init([3, 6, 5, 2], rng, activation=act)
    X = rng.normal(size=(7, 3))
    W = rng.normal(size=(7, 2))

    def loss():
        return float(np.sum(W * mlp_forward(net, X)[0]))

    _, cache = mlp_forward(net, X)
    grads, _ = mlp_backward(net, cache, W)
    assert finite_diff_check(loss, net.arrays(), grads) <= 1e-4


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    net = Mlp.init([4, 8, 1], rng, activation="tanh")
    x = rng.normal(size=4)
    _, cache = mlp_forward(net, x)
    _, gin = mlp_backward(net, cache, np.ones(1))
    assert finite_diff_check(lambda: float(mlp_forward(net, x)[0][0]), [x], [gin]) <= 1e-6


def test_reverse_gradient():
    assert np.array_equal(reverse_gradient(np.array([1.0, -2.0, 0.5])), [-1.0, 2.0, -0.5])
    assert not reverse_gradient(np.zeros(3)).any()
    g = np.random.default_rng(0).normal(size=10)
    assert np.array_equal(reverse_gradient(reverse_gradient(g)), g)


def test_adam_zero_gradient_is_fixed_point():
    p = [np.array([1.0, -2.0]), np.array([[0.5]])]
    before = [a.copy() for a in p]
    st_ = AdamState.for_params(p)
    for _ in range(3):
        adam_step(p, [np.zeros(2), np.zeros((1, 1))], st_, 1e-3)
    assert all(np.array_equal(a, b) for a, b in zip(p, before))
    assert st_.t == 3


@pytest.mark.parametrize("g", [3.0, -0.02])
def test_adam_first_step_is_lr_times_sign(g):
    # t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    p = [np.array([0.7])]
    adam_step(p, [np.array([g])], AdamState.for_params(p), 0.01)
    assert p[0][0] - 0.7 == pytest.approx(-0.01 * np.sign(g), rel=1e-6)


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(3, 2)) for _ in range(5)]
    runs = []
    for _ in range(2):
        p = [np.ones((3, 2))]
        s = AdamState.for_params(p)
        for g in grads:
            adam_step(p, [g], s, 1e-2)
        runs.append(p[0].tobytes())
    assert runs[0] == runs[1]


def test_adam_rejects_non_finite():
    p = [np.zeros(2)]
    with pytest.raises(NonFiniteError):
        adam_step(p, [np.array([np.nan, 0.0])], AdamState.for_params(p), 1e-3)


def test_finite_diff_quadratic():
    p = np.array([1.0, 2.0])
    assert finite_diff_check(lambda: 0.5 * float(p @ p), [p], [p.copy()]) <= 1e-8


def test_finite_diff_constant_loss_zero_grads():
    p = np.array([1.0, -3.0])
    assert finite_diff_check(lambda: 4.2, [p], [np.zeros(2)]) == 0.0


def test_finite_diff_detects_wrong_gradient():
    p = np.array([1.0, 2.0])
    assert finite_diff_check(lambda: 0.5 * float(p @ p), [p], [np.array([1.0, 2.5])]) > 0.1


def test_finite_diff_restores_params():
    p = np.array([0.1, 0.2, 0.3])
    before = p.copy()
    finite_diff_check(lambda: float(np.sum(p ** 3)), [p], [3 * p ** 2])
    assert np.array_equal(p, before)


def test_finite_diff_parts_equal_whole():
    # differencing additive parts separately is the same central difference
    p = np.array([0.3, -1.1])

    def parts():
        return [float(np.sin(p[0])), float(p[1] ** 2), 7.0]

    g = [np.array([np.cos(0.3), -2.2])]
    whole = finite_diff_check(lambda: sum(parts()), [p], g)
    split = finite_diff_check(parts, [p], g)
    assert split <= 1e-8 and whole <= 1e-6


def test_extended_precision_passes_through():
    net = Mlp.init([2, 3, 1], np.random.default_rng(0), activation="tanh")
    xp = Mlp([w.astype(np.longdouble) for w in net.weights],
             [b.astype(np.longdouble) for b in net.biases], "tanh", "identity")
    out, _ = mlp_forward(xp, np.ones((2, 2), dtype=np.longdouble))
    assert out.dtype == np.longdouble
    assert np.allclose(out.astype(float), mlp_forward(net, np.ones((2, 2)))[0], atol=1e-15)
