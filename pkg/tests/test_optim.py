import numpy as np
import pytest

from admmc.errors import ConfigError
from admmc.optim import make_optimizer


def test_sgd_analytic():
    w = np.array([1.0])
    make_optimizer({"kind": "sgd", "lr": 0.1}).step([w], [np.array([0.5])])
    assert w[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_exact_elementwise_formula():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(20)
    g = rng.standard_normal(20)
    expect = w - 0.03 * g
    make_optimizer({"kind": "sgd", "lr": 0.03}).step([w], [g])
    assert np.array_equal(w, expect)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_all_zero_mask_leaves_params(kind):
    w = np.arange(6, dtype=np.float32)
    before = w.copy()
    opt = make_optimizer({"kind": kind, "lr": 0.1})
    opt.step([w], [np.ones(6, dtype=np.float32)], masks=[np.zeros(6)])
    assert np.array_equal(w, before)


def test_adam_mask_freezes_moments():
    rng = np.random.default_rng(1)
    w = rng.standard_normal(10)
    mask = np.arange(10) % 2 == 0
    opt = make_optimizer({"kind": "adam", "lr": 0.01})
    for _ in range(5):
        frozen = w[~mask].copy()
        opt.step([w], [rng.standard_normal(10)], masks=[mask])
        assert np.array_equal(w[~mask], frozen)
    assert np.all(opt.m[0][~mask] == 0) and np.all(opt.v[0][~mask] == 0)


def _adam_scalar(w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    # textbook bias-corrected recursion on f(w) = w^2
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adam_quadratic_matches_scalar_oracle():
    lr = 0.02
    w = np.array([1.0])
    opt = make_optimizer({"kind": "adam", "lr": lr})
    for _ in range(200):
        opt.step([w], [2 * w])
    oracle = _adam_scalar(1.0, lr, 200)
    assert abs(oracle) < 1e-2
    assert abs(w[0]) < 1e-2
    assert w[0] == pytest.approx(oracle, abs=1e-12)


def test_step_counter_and_shapes():
    opt = make_optimizer({"kind": "adam"})
    w = np.zeros(3)
    for t in range(1, 4):
        opt.step([w], [np.ones(3)])
        assert opt.t == t
        assert opt.m[0].shape == w.shape
    with pytest.raises(ConfigError):
        opt.step([w], [np.ones(4)])
    with pytest.raises(ConfigError):
        make_optimizer({"kind": "rmsprop"})
