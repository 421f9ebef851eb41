import math

import numpy as np
import pytest

from admmc import nn
from admmc.data import synthetic_blobs, train_val_split
from admmc.engine import (
    DISCRETENESS,
    SPARSITY,
    CompressionConfig,
    LayerState,
    NetworkSubproblem,
    ResidualReport,
    admm_discretize,
    admm_joint,
    admm_prune,
    augmented_grads,
    check_convergence,
    init_states,
    write_trace_csv,
)
from admmc.errors import ConfigError, DivergenceError
from admmc.optim import make_optimizer
from admmc.projections import QuantSpec, project_quantize
from admmc.training import train_epoch

from oracles import central_diff, max_rel_error


@pytest.fixture(scope="module")
def blobs():
    full = synthetic_blobs(600, 3, 10, seed=0, spread=0.15)
    return train_val_split(full, 100, seed=0)


def _net(seed=0, dtype=np.float32):
    return nn.mlp([10, 12, 3], seed=seed, dtype=dtype)


def test_rho_zero_grads_bit_identical():
    rng = np.random.default_rng(0)
    net = _net()
    x, y = rng.random((8, 10), dtype=np.float32), rng.integers(0, 3, 8)
    cfg = CompressionConfig(alphas=[20, 5], bits=[2, 2], rho=0.0)
    states = init_states(net.weights, cfg, {SPARSITY})
    for st in states:
        st.U = rng.standard_normal(st.U.shape).astype(np.float32)
    la, ga = augmented_grads(net, x, y, states, {SPARSITY})
    lb, gb = nn.loss_and_grads(net, x, y)
    assert la == lb
    for a, b in zip(ga, gb):
        assert np.array_equal(a["W"], b["W"]) and np.array_equal(a["b"], b["b"])


def test_penalty_vanishes_when_w_equals_z_minus_u():
    rng = np.random.default_rng(1)
    net = _net(dtype=np.float64)
    x, y = rng.random((4, 10)), rng.integers(0, 3, 4)
    states = []
    for W in net.weights:
        Z = rng.standard_normal(W.shape)
        states.append(LayerState(Z=Z, U=Z - W, rho=0.5))
    la, ga = augmented_grads(net, x, y, states, {SPARSITY})
    lb, gb = nn.loss_and_grads(net, x, y)
    assert la == pytest.approx(lb, abs=1e-12)
    for a, b in zip(ga, gb):
        assert np.allclose(a["W"], b["W"], atol=1e-12)


def test_augmented_gradient_finite_difference():
    rng = np.random.default_rng(2)
    net = nn.mlp([6, 8, 4], seed=3, dtype=np.float64)
    x, y = rng.standard_normal((5, 6)), rng.integers(0, 4, 5)
    states = [
        LayerState(
            Z=rng.standard_normal(W.shape),
            U=0.1 * rng.standard_normal(W.shape),
            Y=rng.standard_normal(W.shape),
            V=0.1 * rng.standard_normal(W.shape),
            rho=0.3,
        )
        for W in net.weights
    ]
    active = {SPARSITY, DISCRETENESS}
    _, grads = augmented_grads(net, x, y, states, active)
    for p, g in zip(net.params, grads):
        num = central_diff(lambda: augmented_grads(net, x, y, states, active)[0], p["W"], 1e-3)
        assert max_rel_error(g["W"], num) <= 1e-2


def test_state_count_mismatch():
    net = _net()
    with pytest.raises(ConfigError):
        augmented_grads(net, np.zeros((1, 10)), np.zeros(1, int), [LayerState()], {SPARSITY})


def test_rho_zero_epoch_equals_plain_epoch(blobs):
    train, _ = blobs
    a, b = _net(), _net()
    cfg = CompressionConfig(alphas=[30, 10], rho=0.0, optimizer={"kind": "adam", "lr": 1e-3})
    states = init_states(a.weights, cfg, {SPARSITY})
    NetworkSubproblem(a, train, states, {SPARSITY}, cfg, rng=np.random.default_rng(5))(0)
    train_epoch(b, train, make_optimizer(cfg.optimizer), np.random.default_rng(5), cfg.batch_size)
    for p, q in zip(a.params, b.params):
        assert np.array_equal(p["W"], q["W"]) and np.array_equal(p["b"], q["b"])


def _recording_callback(log):
    def cb(k, rep, states):
        log.append(
            {
                "Z": [None if s.Z is None else s.Z.copy() for s in states],
                "U": [None if s.U is None else s.U.copy() for s in states],
                "Y": [None if s.Y is None else s.Y.copy() for s in states],
                "V": [None if s.V is None else s.V.copy() for s in states],
                "alpha": [s.alpha for s in states],
                "spec": [s.spec for s in states],
            }
        )

    return cb


def test_dual_identities_and_feasibility_every_iteration(blobs):
    net = _net()
    cfg = CompressionConfig(alphas=[25, 8], bits=[2, 2], rho=0.05, max_iters=4, mode="joint")
    snaps, weights = [], []

    def cb(k, rep, states):
        _recording_callback(snaps)(k, rep, states)
        weights.append([W.copy() for W in net.weights])

    # U and V start at zero, so the first snapshot is checked against zeros
    admm_joint(net, cfg, blobs, callback=cb, finalize=False)
    assert len(snaps) == 4
    prev_U = [np.zeros_like(W) for W in weights[0]]
    prev_V = [np.zeros_like(W) for W in weights[0]]
    for s, Ws in zip(snaps, weights):
        for i, W in enumerate(Ws):
            assert np.array_equal(s["U"][i], prev_U[i] + W - s["Z"][i])
            assert np.array_equal(s["V"][i], prev_V[i] + W - s["Y"][i])
            assert np.count_nonzero(s["Z"][i]) <= s["alpha"][i]
            spec = s["spec"][i]
            nz = s["Y"][i] != 0
            assert set(np.unique(s["Y"][i][nz]).tolist()) <= set(spec.levels(W.dtype).tolist())
            # joint mode: discrete copy lives on the current sparse support
            assert np.all(s["Y"][i][s["Z"][i] == 0] == 0)
        prev_U, prev_V = s["U"], s["V"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sequential_prune_exact_alpha_and_divergence(blobs):
    net = _net()
    cfg = CompressionConfig(alphas=[30, 9], rho=0.01, max_iters=2, retrain_max_epochs=1)
    net, masks, trace = admm_prune(net, cfg, blobs)
    assert [int(m.sum()) for m in masks] == [30, 9]
    assert [int(np.count_nonzero(W)) for W in net.weights] == [30, 9]
    assert len(trace) <= 2

    bad = _net()
    bad.params[0]["W"][...] = np.inf
    with pytest.raises(DivergenceError) as exc:
        admm_prune(bad, cfg, blobs)
    assert exc.value.iteration == 0


def test_alpha_numel_keeps_all(blobs):
    net = _net()
    n = [W.size for W in net.weights]
    cfg = CompressionConfig(alphas=n, rho=0.01, max_iters=1, retrain_max_epochs=0)
    _, masks, _ = admm_prune(net, cfg, blobs)
    assert all(m.all() for m in masks)


def test_discretize_fixed_point_zero_residuals(blobs):
    net = _net()
    specs = [QuantSpec(4, 0.1), QuantSpec(4, 0.1)]
    masks = [np.ones(W.shape, bool) for W in net.weights]
    for p, s in zip(net.params, specs):
        p["W"][...] = project_quantize(p["W"], s)
    cfg = CompressionConfig(bits=[2, 2], rho=1e-3, max_iters=3, optimizer={"kind": "sgd", "lr": 0.0})
    _, _, trace = admm_discretize(net, masks, cfg, blobs, specs=specs)
    assert len(trace) == 1
    assert trace[0].w_y == [0.0, 0.0] and trace[0].y_drift == [0.0, 0.0]


def test_discretize_v_identity_and_pruned_stay_zero(blobs):
    net = _net()
    masks = [np.random.default_rng(i).random(W.shape) < 0.5 for i, W in enumerate(net.weights)]
    for p, m in zip(net.params, masks):
        p["W"][~m] = 0
    cfg = CompressionConfig(bits=[2, 3], rho=0.01, max_iters=3, discreteness="cluster")
    snaps, weights = [], []

    def cb(k, rep, states):
        _recording_callback(snaps)(k, rep, states)
        weights.append([W.copy() for W in net.weights])

    admm_discretize(net, masks, cfg, blobs, callback=cb)
    prev = [np.zeros_like(W) for W in net.weights]
    for s, Ws in zip(snaps, weights):
        for i, W in enumerate(Ws):
            assert np.array_equal(s["V"][i], prev[i] + W - s["Y"][i])
            assert np.allclose(s["V"][i] - prev[i], W - s["Y"][i], rtol=0, atol=4 * np.finfo(W.dtype).eps)
            assert np.all(W[~masks[i]] == 0)
            assert len(np.unique(s["Y"][i][masks[i]])) <= 2 ** [2, 3][i]
        prev = s["V"]


def test_joint_without_discreteness_matches_prune(blobs):
    a, b = _net(), _net()
    cfg = CompressionConfig(alphas=[30, 9], bits=None, rho=0.02, max_iters=3, retrain_max_epochs=2)
    _, ma, ta = admm_prune(a, cfg, blobs)
    cfg_j = CompressionConfig(alphas=[30, 9], bits=None, rho=0.02, max_iters=3, retrain_max_epochs=2, mode="joint")
    _, mb, _, tb = admm_joint(b, cfg_j, blobs)
    assert [r.w_z for r in ta] == [r.w_z for r in tb]
    for p, q, u, v in zip(a.params, b.params, ma, mb):
        assert np.array_equal(p["W"], q["W"]) and np.array_equal(u, v)


def test_joint_trace_length_and_full_feasibility(blobs):
    net = _net()
    cfg = CompressionConfig(
        alphas=[30, 9], bits=[2, 2], rho=0.02, max_iters=3, mode="joint", retrain_max_epochs=1, retrain_epochs_per_step=0.2
    )
    seen = []
    net, masks, specs, trace = admm_joint(net, cfg, blobs, callback=lambda k, r, s: seen.append(k))
    assert len(trace) == len(seen)
    for W, m, s, a in zip(net.weights, masks, specs, cfg.alphas):
        assert np.count_nonzero(W) <= m.sum() == a
        levels = set(s.levels(W.dtype).tolist())
        assert set(np.unique(W[m]).tolist()) <= levels
        assert np.all(W[~m] == 0)


def test_check_convergence_cases():
    zero = ResidualReport(1, [0.0], [0.0], [0.0], [0.0])
    assert check_convergence(zero, [1e-12])
    eps = 0.5
    assert not check_convergence(ResidualReport(1, [eps + 1e-9], [0.0], [None], [None]), [eps])
    big = ResidualReport(1, [1e9], [1e9], [1e9], [1e9])
    assert check_convergence(big, [math.inf])


def test_convergence_stops_early_with_infinite_eps(blobs):
    net = _net()
    cfg = CompressionConfig(alphas=[30, 9], rho=0.01, eps=math.inf, max_iters=5, retrain_max_epochs=0)
    _, _, trace = admm_prune(net, cfg, blobs)
    assert len(trace) == 1


def test_trace_csv(tmp_path):
    write_trace_csv([ResidualReport(1, [0.5, 0.25], [1.0, 2.0], [None, None], [None, None])], tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,layer,w_minus_z,z_drift,w_minus_y,y_drift"
    assert lines[1] == "1,0,0.5,1.0,,"


def test_config_validation():
    with pytest.raises(ConfigError):
        CompressionConfig(mode="both")
    with pytest.raises(ConfigError):
        CompressionConfig(freeze_fraction=0)
    with pytest.raises(ConfigError):
        CompressionConfig(rho=[1.0]).rhos(2)
    assert CompressionConfig(bits=[2, None]).levels(2) == [4, None]
