import io

import numpy as np
import pytest

from admmc import nn
from admmc.errors import ConfigError, FormatError, InputError

from oracles import central_diff, max_rel_error

GRAD_TOL = 1e-2
FD_STEP = 1e-3


def _check_net_grads(net, x, y):
    _, grads = nn.loss_and_grads(net, x, y)
    for p, g in zip(net.params, grads):
        for key in ("W", "b"):
            num = central_diff(lambda: nn.loss_and_grads(net, x, y)[0], p[key], FD_STEP)
            assert max_rel_error(g[key], num) <= GRAD_TOL, key


def test_identity_dense_returns_input():
    net = nn.Network([nn.Dense(4, 4)], (4,), init=False)
    net.params[0]["W"][...] = np.eye(4, dtype=np.float32)
    x = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    logits, _ = nn.forward(net, x)
    assert np.array_equal(logits, x)


def test_zero_params_give_zero_logits():
    net = nn.mlp([5, 7, 3], seed=1)
    for p in net.params:
        p["W"][...] = 0
        p["b"][...] = 0
    logits, _ = nn.forward(net, np.ones((2, 5), dtype=np.float32))
    assert np.all(logits == 0)


def test_mlp_784_shape_and_finite():
    net = nn.mlp([784, 300, 100, 10], seed=0)
    x = np.random.default_rng(0).random((16, 784), dtype=np.float32)
    logits, _ = nn.forward(net, x)
    assert logits.shape == (16, 10)
    assert np.all(np.isfinite(logits))


def test_forward_shape_mismatch():
    net = nn.mlp([5, 3], seed=0)
    with pytest.raises(ConfigError):
        nn.forward(net, np.ones((2, 6)))


def test_uniform_logits_loss_is_log_c():
    for c in (2, 10, 37):
        loss, _ = nn.softmax_cross_entropy(np.zeros((4, c)), np.arange(4) % c)
        assert loss == pytest.approx(np.log(c), rel=1e-12)


def test_loss_decreases_to_zero_with_margin():
    prev = np.inf
    for margin in (0.0, 1.0, 5.0, 20.0, 60.0):
        logits = np.array([[margin, 0.0, 0.0]])
        loss, _ = nn.softmax_cross_entropy(logits, np.array([0]))
        assert 0 <= loss < prev
        prev = loss
    assert prev < 1e-20


def test_label_out_of_range():
    with pytest.raises(InputError):
        nn.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(InputError):
        nn.softmax_cross_entropy(np.zeros((2, 3)), np.array([-1, 0]))


def test_loss_non_negative_random():
    rng = np.random.default_rng(3)
    for _ in range(50):
        logits = rng.standard_normal((5, 4)) * 10
        loss, _ = nn.softmax_cross_entropy(logits, rng.integers(0, 4, 5))
        assert loss >= 0


def test_dense_fd_gradients_6_8_4():
    rng = np.random.default_rng(0)
    net = nn.mlp([6, 8, 4], seed=0, dtype=np.float64)
    for p in net.params:
        p["b"][...] = rng.standard_normal(p["b"].shape) * 0.1
    _check_net_grads(net, rng.standard_normal((5, 6)), rng.integers(0, 4, 5))


def test_conv_pool_fd_gradients():
    rng = np.random.default_rng(1)
    layers = [
        nn.Conv2D(2, 3, 3, stride=1),
        nn.ReLU(),
        nn.MaxPool2D(2, 2),
        nn.Conv2D(3, 2, 2, stride=2),
        nn.Flatten(),
        nn.Dense(2, 3),
    ]
    net = nn.Network(layers, (2, 7, 7), seed=2, dtype=np.float64)
    for p in net.params:
        p["b"][...] = rng.standard_normal(p["b"].shape) * 0.1
    _check_net_grads(net, rng.standard_normal((3, 2, 7, 7)), rng.integers(0, 3, 3))


def test_conv_kernel_backward_fd_with_stride():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 7, 6))
    filt = rng.standard_normal((4, 3, 3, 3))
    upstream = rng.standard_normal(nn.conv2d_forward(filt, x, stride=2)[0].shape)

    def f():
        return float(np.sum(nn.conv2d_forward(filt, x, stride=2)[0] * upstream))

    out, cols = nn.conv2d_forward(filt, x, stride=2)
    dx, dfilt, db = nn.conv2d_backward(upstream, filt, x.shape, cols, stride=2)
    assert max_rel_error(dx, central_diff(f, x)) <= GRAD_TOL
    assert max_rel_error(dfilt, central_diff(f, filt)) <= GRAD_TOL
    assert np.allclose(db, upstream.sum(axis=(0, 2, 3)))


def test_conv_output_dims():
    x = np.zeros((1, 1, 11, 9))
    for k, s in ((3, 1), (3, 2), (5, 3), (1, 4)):
        out, _ = nn.conv2d_forward(np.zeros((2, 1, k, k)), x, stride=s)
        assert out.shape == (1, 2, (11 - k) // s + 1, (9 - k) // s + 1)


def test_conv_identity_and_all_ones():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 5))
    out, _ = nn.conv2d_forward(np.ones((1, 1, 1, 1)), x)
    assert np.array_equal(out, x)
    out, _ = nn.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 5, 5)))
    assert np.all(out == 9)


def test_conv_errors():
    with pytest.raises(ConfigError):
        nn.conv2d_forward(np.ones((1, 1, 6, 6)), np.ones((1, 1, 5, 5)))
    with pytest.raises(ConfigError):
        nn.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 5, 5)), stride=0)


def test_maxpool_ties_route_to_first():
    x = np.ones((1, 1, 2, 2))
    out, arg = nn.maxpool_forward(x, 2, 2)
    dx = nn.maxpool_backward(np.ones_like(out), arg, x.shape, 2, 2)
    assert dx[0, 0, 0, 0] == 1 and dx.sum() == 1


def test_determinism_bit_identical():
    rng = np.random.default_rng(0)
    x, y = rng.random((8, 20), dtype=np.float32), rng.integers(0, 5, 8)
    a = nn.mlp([20, 16, 5], seed=7)
    b = nn.mlp([20, 16, 5], seed=7)
    la, ga = nn.loss_and_grads(a, x, y)
    lb, gb = nn.loss_and_grads(b, x, y)
    assert la == lb
    for u, v in zip(ga, gb):
        assert np.array_equal(u["W"], v["W"]) and np.array_equal(u["b"], v["b"])


def test_lenet5_weight_count():
    assert nn.lenet5().num_weights() == 430_500


def test_checkpoint_round_trip_and_magic():
    net = nn.Network(
        [nn.Conv2D(1, 2, 3), nn.ReLU(), nn.MaxPool2D(2, 2), nn.Flatten(), nn.Dense(8, 3)], (1, 6, 6), seed=5
    )
    buf = nn.checkpoint_bytes(net)
    assert buf[:8] == b"ADMMNET1"
    back = nn.read_checkpoint(io.BytesIO(buf))
    assert [type(layer) for layer in back.layers] == [type(layer) for layer in net.layers]
    for p, q in zip(net.params, back.params):
        assert np.array_equal(p["W"], q["W"]) and np.array_equal(p["b"], q["b"])
    with pytest.raises(FormatError):
        nn.read_checkpoint(io.BytesIO(b"NOTANET!" + buf[8:]))
