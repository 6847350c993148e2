import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fhn_infer.errors import NonFiniteLoss, ShapeError
from fhn_infer.nn import (Activation, AdamState, AvgPool1d, Conv1d, Dense, Flatten, Network,
                          NetworkSpec, TrainConfig, adam_step, cnn_spec, dense_spec, init_weights,
                          param_count, shape_chain, swish, swish_grad, train)

from oracles import scalar_adam


def relative_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def fd_gradient(net, x, y, h=1e-5):
    g = np.empty(net.n_params)
    p = net.parameters
    for i in range(net.n_params):
        old = p[i]
        p[i] = old + h
        lp, _ = net.backward(x, y)
        p[i] = old - h
        lm, _ = net.backward(x, y)
        p[i] = old
        g[i] = (lp - lm) / (2 * h)
    return g


def random_net(spec, seed):
    rng = np.random.default_rng(seed)
    return Network(spec, rng.normal(0, 0.5, param_count(spec)))


def check_gradient(spec, seed, batch=3):
    rng = np.random.default_rng(seed + 1000)
    net = random_net(spec, seed)
    x = rng.normal(size=(batch, spec.input_len * spec.input_channels))
    y = rng.normal(size=(batch, spec.output_len))
    _, g = net.backward(x, y)
    return relative_error(g, fd_gradient(net, x, y))


# one small spec per layer type, each wrapped so the layer under test has a gradient path
LAYER_SPECS = {
    "dense": NetworkSpec(5, (Dense(3),), 3),
    "swish": NetworkSpec(4, (Dense(4), Activation("swish"), Dense(2)), 2),
    "conv": NetworkSpec(9, (Conv1d(2, 3, 2), Flatten(), Dense(2)), 2),
    "conv_multichannel": NetworkSpec(11, (Conv1d(3, 3, 2), Conv1d(2, 2, 1), Flatten(), Dense(1)), 1),
    "pool": NetworkSpec(12, (Conv1d(2, 3, 1), AvgPool1d(2, 2), Flatten(), Dense(2)), 2),
    "pool_overlapping": NetworkSpec(12, (Conv1d(2, 3, 1), AvgPool1d(3, 2), Flatten(), Dense(2)), 2),
    "flatten": NetworkSpec(6, (Conv1d(2, 2, 2), Activation("swish"), Flatten(), Dense(2)), 2),
}


@pytest.mark.parametrize("name", sorted(LAYER_SPECS))
@pytest.mark.parametrize("seed", range(10))
def test_layer_gradients(name, seed):
    assert check_gradient(LAYER_SPECS[name], seed) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_tiny_dense_gradient(seed):
    assert check_gradient(dense_spec(8, 2, 4), seed) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_tiny_cnn_gradient(seed):
    assert check_gradient(cnn_spec(32, 2, (1, 2)), seed) < 1e-5


def test_zero_residual():
    net = random_net(dense_spec(6, 2, 4), 0)
    x = np.random.default_rng(1).normal(size=(4, 6))
    loss, g = net.backward(x, net.forward(x))
    assert loss == 0.0
    bias = net.layer_params(len(net.spec.layers) - 1, g)[1]
    assert np.all(bias == 0.0)


def test_param_count_dense_minimum():
    assert param_count(dense_spec(1000, 2, 4)) == 4034


def test_param_count_single_unit():
    assert param_count(NetworkSpec(1, (Dense(1),), 1)) == 2


def test_param_count_cnn_hand_tally():
    # conv 3x1x8+8, conv 3x8x16+16, conv 3x16x32+32, dense 480x32+32, 32x32+32, 32x2+2
    tally = (24 + 8) + (384 + 16) + (1536 + 32) + (15360 + 32) + (1024 + 32) + (64 + 2)
    assert param_count(cnn_spec(1000, 8)) == tally == 18514


def test_param_count_wide_dense_at_longer_input():
    # the largest dense sweep cell; 442,114 is only reached with 1516 inputs
    assert param_count(dense_spec(1000, 16, 128)) == 376066
    assert param_count(dense_spec(1516, 16, 128)) == 442114


def test_cnn_shape_chain():
    lengths = [s[0] for s in shape_chain(cnn_spec(1000, 8))]
    conv_pool = [lengths[0]] + [lengths[i] for i in (1, 3, 4, 6, 7, 9)]
    assert conv_pool == [1000, 499, 249, 124, 62, 30, 15]


def test_shape_errors():
    with pytest.raises(ShapeError):
        shape_chain(cnn_spec(8, 2, (1, 2, 4)))
    with pytest.raises(ShapeError):
        shape_chain(NetworkSpec(10, (Dense(3),), 2))


@settings(max_examples=60, deadline=None)
@given(st.integers(10, 200), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 4), st.integers(1, 3))
def test_param_count_matches_vector(input_len, filters, blocks, kernel, units, out):
    spec = cnn_spec(input_len, filters, tuple(2**b for b in range(blocks)), out, (units,),
                    kernel, 2)
    try:
        n = param_count(spec)
    except ShapeError:
        return
    assert init_weights(spec, 0).parameters.shape == (n,)
    dspec = dense_spec(input_len, blocks, units, out)
    assert Network(dspec).n_params == param_count(dspec)


def test_swish_values():
    assert swish(np.array(0.0)) == 0.0
    assert swish(np.array(20.0)) == pytest.approx(20.0, abs=1e-7)


def test_swish_derivative_matches_fd():
    x = np.linspace(-5, 5, 101)
    h = 1e-5
    fd = (swish(x + h) - swish(x - h)) / (2 * h)
    assert np.max(np.abs(swish_grad(x) - fd)) < 1e-6


def test_zero_parameters_give_zero_output():
    net = Network(cnn_spec(64, 2, (1, 2)))
    assert np.all(net.forward(np.random.default_rng(0).normal(size=(3, 64))) == 0)


def test_selector_kernel():
    spec = NetworkSpec(5, (Conv1d(1, 3, 2), Flatten()), 2)
    net = Network(spec)
    net.layer_params(0)[0][:, 0, 0] = [1.0, 0.0, 0.0]
    x = np.array([[3.0, -1.0, 7.0, 2.0, 5.0]])
    np.testing.assert_array_equal(net.forward(x), [[3.0, 7.0]])


def test_average_pool():
    spec = NetworkSpec(5, (Conv1d(1, 2, 1), AvgPool1d(2, 2), Flatten()), 2)
    net = Network(spec)
    # kernel [1, 0] passes the input through, leaving [1, 3, 5, 7] for the pool
    net.layer_params(0)[0][:, 0, 0] = [1.0, 0.0]
    np.testing.assert_array_equal(net.forward(np.array([[1.0, 3.0, 5.0, 7.0, 99.0]])), [[2.0, 6.0]])


def test_output_scales_with_last_layer():
    net = random_net(dense_spec(6, 2, 4), 3)
    x = np.random.default_rng(0).normal(size=(5, 6))
    w, b = net.layer_params(len(net.spec.layers) - 1)
    b[...] = 0.0
    y = net.forward(x)
    w *= 2.5
    np.testing.assert_allclose(net.forward(x), 2.5 * y, rtol=1e-13)


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    adam_step(AdamState.fresh(2), p, np.zeros(2))
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_is_sign():
    p = np.zeros(3)
    g = np.array([3.0, -0.5, 100.0])
    adam_step(AdamState.fresh(3, lr=0.01), p, g)
    np.testing.assert_allclose(p, -0.01 * np.sign(g), rtol=1e-3)


def test_adam_matches_scalar_oracle():
    ref = scalar_adam(1.5, lambda q: q, 10)
    p = np.array([1.5])
    state = AdamState.fresh(1)
    for r in ref:
        adam_step(state, p, p.copy())
        assert p[0] == pytest.approx(r, abs=1e-12)


def test_glorot_support_and_determinism():
    spec = cnn_spec(100, 4, (1, 2))
    a, b = init_weights(spec, 9), init_weights(spec, 9)
    assert a.parameters.tobytes() == b.parameters.tobytes()
    for i, layer in enumerate(spec.layers):
        entries = a.layer_params(i)
        if not entries:
            continue
        w, bias = entries
        if isinstance(layer, Conv1d):
            fan_in, fan_out = w.shape[0] * w.shape[1], w.shape[0] * w.shape[2]
        else:
            fan_in, fan_out = w.shape
        assert np.max(np.abs(w)) <= np.sqrt(6 / (fan_in + fan_out))
        assert np.all(bias == 0)


def test_glorot_variance():
    spec = NetworkSpec(400, (Dense(300),), 300)
    w = init_weights(spec, 2).layer_params(0)[0]
    assert w.var() == pytest.approx(2 / 700, rel=0.05)


def test_save_load(tmp_path):
    net = init_weights(cnn_spec(64, 2, (1, 2)), 4)
    net.save(tmp_path / "m.fhnnn")
    back = Network.load(tmp_path / "m.fhnnn")
    assert back.spec == net.spec
    assert back.parameters.tobytes() == net.parameters.tobytes()


def _toy_problem(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 10))
    y = np.stack([x[:, :3].sum(axis=1), x[:, 5] - x[:, 7]], axis=1)
    return x, y


def test_zero_epochs_returns_init():
    x, y = _toy_problem()
    net = init_weights(dense_spec(10, 2, 8), 1)
    out, hist = train(net, x, y, TrainConfig(epochs=0))
    np.testing.assert_array_equal(out.parameters, net.parameters)
    assert hist.train_loss == []


def test_training_is_deterministic_and_learns():
    x, y = _toy_problem()
    net = init_weights(dense_spec(10, 2, 8), 1)
    cfg = TrainConfig(epochs=60, batch_size=7, lr=0.01, shuffle_seed=3)
    a, ha = train(net, x, y, cfg, x, y)
    b, hb = train(net, x, y, cfg, x, y)
    assert a.parameters.tobytes() == b.parameters.tobytes()
    assert ha.train_loss == hb.train_loss
    assert ha.train_loss[-1] < ha.train_loss[0] / 10


def test_shuffle_seed_changes_trajectory():
    x, y = _toy_problem()
    net = init_weights(dense_spec(10, 2, 8), 1)
    a, _ = train(net, x, y, TrainConfig(epochs=2, shuffle_seed=0))
    b, _ = train(net, x, y, TrainConfig(epochs=2, shuffle_seed=1))
    assert not np.array_equal(a.parameters, b.parameters)


def test_non_finite_loss_reported():
    x, y = _toy_problem()
    y[5, 0] = np.inf
    with pytest.raises(NonFiniteLoss):
        train(init_weights(dense_spec(10, 1, 4), 0), x, y, TrainConfig(epochs=1, batch_size=64))


def test_history_csv(tmp_path):
    x, y = _toy_problem()
    _, hist = train(init_weights(dense_spec(10, 1, 4), 0), x, y, TrainConfig(epochs=3), x, y)
    hist.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,valid_loss" and len(lines) == 4
