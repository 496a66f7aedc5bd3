import json
import math

import numpy as np
import pytest

from treemdn.leaf_mdn import (
    GaussianParams,
    Layer,
    MlpConfig,
    MlpParams,
    clamp_log_sigma,
    init_mlp,
    leaf_forward,
    mlp_backward,
    mlp_forward,
    mlp_param_count,
)
from treemdn.numerics import finite_diff_gradient, max_relative_error

EXP_HALF = 1.64872127070012815  # exp(0.5), mpmath
EXP_M7 = 0.000911881965554516208  # exp(-7), mpmath


def hand_net(activation="relu"):
    return MlpParams(
        [
            Layer(np.array([[1.0, -1.0], [2.0, 0.5]]), np.array([0.5, -1.0])),
            Layer(np.array([[1.0, 2.0], [-1.0, 0.5]]), np.array([0.1, 0.2])),
        ],
        activation,
    )


def forward_longdouble(params: MlpParams, x):
    h = np.asarray(x, dtype=np.longdouble)
    for k, layer in enumerate(params.layers):
        h = layer.weights.astype(np.longdouble) @ h + layer.biases.astype(np.longdouble)
        if k < len(params.layers) - 1:
            h = np.maximum(h, 0) if params.activation == "relu" else np.tanh(h)
    return h


def test_config_and_counts():
    with pytest.raises(ValueError, match="formula domain"):
        MlpConfig(1, 10, 4, 2)
    assert mlp_param_count(MlpConfig(3, 100, 30, 2)) == 13_200
    assert mlp_param_count(MlpConfig(2, 50, 4, 2)) == 300
    assert mlp_param_count(MlpConfig(2, 1, 1, 1)) == 2
    assert MlpConfig(3, 5, 4, 2).layer_dims == [(4, 5), (5, 5), (5, 2)]


def test_init_shapes_and_bounds():
    params = init_mlp(MlpConfig(3, 50, 4, 2), np.random.default_rng(0))
    assert [l.weights.shape for l in params.layers] == [(50, 4), (50, 50), (2, 50)]
    for layer in params.layers:
        s = math.sqrt(6.0 / sum(layer.weights.shape))
        assert np.all(np.abs(layer.weights) <= s)
        assert np.all(layer.biases == 0.0)


def test_forward_examples():
    zero = MlpParams([Layer(np.zeros((3, 2)), np.zeros(3)), Layer(np.zeros((2, 3)), np.zeros(2))])
    np.testing.assert_array_equal(mlp_forward(zero, [1.5, -2.0]), [0.0, 0.0])
    np.testing.assert_allclose(mlp_forward(hand_net(), [1.0, 2.0]), [4.1, 1.2], rtol=0, atol=1e-15)
    h = np.tanh([-0.5, 2.0])
    expected = np.array([h[0] + 2 * h[1] + 0.1, -h[0] + 0.5 * h[1] + 0.2])
    np.testing.assert_allclose(mlp_forward(hand_net("tanh"), [1.0, 2.0]), expected, rtol=0, atol=1e-15)
    ident = MlpParams([Layer(np.eye(3), np.zeros(3)), Layer(np.eye(3), np.zeros(3))])
    x = np.array([0.0, 0.7, 3.5])
    np.testing.assert_array_equal(mlp_forward(ident, x), x)


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        mlp_forward(hand_net(), [1.0, 2.0, 3.0])


def test_leaf_forward_examples():
    bias_only = lambda out: MlpParams([Layer(np.zeros((2, 1)), np.zeros(2)), Layer(np.zeros((2, 2)), np.asarray(out))])
    g = leaf_forward(bias_only([0.3, 0.0]), [5.0])
    assert (g.mu, g.sigma) == (0.3, 1.0)
    g = leaf_forward(bias_only([0.0, -9.0]), [5.0])
    assert g.sigma == pytest.approx(EXP_M7, rel=1e-15)
    g = leaf_forward(bias_only([1.5, 0.5]), [5.0])
    assert g.mu == 1.5 and g.sigma == pytest.approx(EXP_HALF, rel=1e-15)


def test_sigma_always_positive():
    for raw in (-1e300, -700.0, -7.0, 0.0, 7.0, 700.0, 1e300):
        g = GaussianParams(0.0, raw)
        assert 0.0 < g.sigma < math.inf
    np.testing.assert_array_equal(clamp_log_sigma([-8.0, 3.0, 8.0]), [-7.0, 3.0, 7.0])


def test_backward_examples():
    net = hand_net()
    grads, gx = mlp_backward(net, [1.0, 2.0], np.zeros(2))
    for g in grads:
        assert not g.weights.any() and not g.biases.any()
    assert not gx.any()
    single = MlpParams([Layer(np.array([[0.5, -1.0, 2.0], [1.0, 1.0, 0.0]]), np.zeros(2))])
    up = np.array([0.3, -2.0])
    x = np.array([1.0, 2.0, -1.0])
    grads, gx = mlp_backward(single, x, up)
    np.testing.assert_array_equal(grads[0].weights, np.outer(up, x))
    np.testing.assert_array_equal(grads[0].biases, up)
    np.testing.assert_allclose(gx, up @ single.layers[0].weights, rtol=0, atol=0)
    with pytest.raises(ValueError, match="shape mismatch"):
        mlp_backward(net, [1.0, 2.0], np.zeros(3))


def _flatten(params: MlpParams, x):
    return np.concatenate([a.ravel() for l in params.layers for a in (l.weights, l.biases)] + [x])


def _unflatten(template: MlpParams, vec):
    layers, o = [], 0
    for l in template.layers:
        w = vec[o : o + l.weights.size].reshape(l.weights.shape)
        o += l.weights.size
        b = vec[o : o + l.biases.size]
        o += l.biases.size
        layers.append(Layer(w, b))
    return MlpParams(layers, template.activation), vec[o:]


def _check_backward(params: MlpParams, x, up):
    grads, gx = mlp_backward(params, x, up)
    analytic = np.concatenate([a.ravel() for g in grads for a in (g.weights, g.biases)] + [gx])

    def f(vec):
        p, xx = _unflatten(params, vec)
        return up.astype(np.longdouble) @ forward_longdouble(p, xx)

    numeric = finite_diff_gradient(f, _flatten(params, x), eps=1e-6)
    return max_relative_error(analytic, numeric)


def test_backward_random_4_50_2():
    rng = np.random.default_rng(10)
    params = init_mlp(MlpConfig(2, 50, 4, 2), rng)
    for layer in params.layers:
        layer.biases += rng.normal(0, 0.3, layer.biases.shape)
    assert _check_backward(params, rng.standard_normal(4), rng.standard_normal(2)) <= 1e-6


def test_backward_matches_finite_differences_100_configs():
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(100):
        cfg = MlpConfig(
            depth=int(rng.integers(2, 4)),
            width=int(rng.integers(1, 51)),
            in_dim=int(rng.integers(1, 6)),
            out_dim=int(rng.integers(1, 4)),
            hidden_activation=("relu", "tanh")[trial % 2],
        )
        params = init_mlp(cfg, rng)
        for layer in params.layers:
            layer.biases += rng.normal(0, 0.3, layer.biases.shape)
        worst = max(worst, _check_backward(params, rng.standard_normal(cfg.in_dim), rng.standard_normal(cfg.out_dim)))
    assert worst <= 1e-6


def test_batched_backward_sums_rows():
    rng = np.random.default_rng(12)
    params = init_mlp(MlpConfig(3, 7, 4, 2, "tanh"), rng)
    x = rng.standard_normal((5, 4))
    up = rng.standard_normal((5, 2))
    grads, gx = mlp_backward(params, x, up)
    for i in range(5):
        gi, gxi = mlp_backward(params, x[i], up[i])
        np.testing.assert_allclose(gx[i], gxi, rtol=1e-13, atol=1e-15)
    total = [mlp_backward(params, x[i], up[i])[0] for i in range(5)]
    for k, g in enumerate(grads):
        np.testing.assert_allclose(g.weights, sum(t[k].weights for t in total), rtol=1e-12, atol=1e-14)


def test_serialization_round_trip_is_bit_exact():
    rng = np.random.default_rng(13)
    params = init_mlp(MlpConfig(3, 20, 4, 2), rng)
    for layer in params.layers:
        layer.biases += rng.normal(0, 0.3, layer.biases.shape)
    text = json.dumps([{"w": l.weights.tolist(), "b": l.biases.tolist()} for l in params.layers])
    back = MlpParams([Layer(np.array(d["w"]), np.array(d["b"])) for d in json.loads(text)], params.activation)
    x = rng.standard_normal((50, 4))
    np.testing.assert_array_equal(mlp_forward(back, x), mlp_forward(params, x))
