"""ADMM driver for joint weight pruning and clustering/quantization.

Each layer's weights ``W`` are coupled to a sparse copy ``Z`` (dual ``U``)
and a discrete copy ``Y`` (dual ``V``). One iteration is

1. minimize ``f(W, b) + rho/2 ||W - Z + U||^2 + rho/2 ||W - Y + V||^2``
   over ``W, b`` (a few epochs of SGD/Adam for a network),
2. ``Z <- project_sparsity(W + U)``, ``Y <- project_{quantize|cluster}(W + V)``,
3. ``U <- U + W - Z``, ``V <- V + W - Y``.

Sequential mode runs the sparsity half first (:func:`admm_prune`) and the
discreteness half on the pruned survivors afterwards (:func:`admm_discretize`).
:func:`run_admm` is the model-agnostic core; it only needs the live weight
arrays and a callable that solves step 1.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError
from .finalize import cluster_train_and_retrain, iterative_quantize, masked_retrain
from .optim import make_optimizer
from .projections import (
    ClusterSpec,
    QuantSpec,
    fit_interval,
    init_centroids,
    lloyd_1d,
    project_cluster,
    project_quantize,
    project_sparsity,
)
from .training import train_epoch

log = logging.getLogger(__name__)

SPARSITY = "sparsity"
DISCRETENESS = "discreteness"


@dataclass
class CompressionConfig:
    """Per-layer targets plus the phase schedule.

    ``alphas[i]`` is the retained-weight count of trainable layer ``i``
    (``None`` disables pruning), ``bits[i]`` gives ``M_i = 2**bits[i]``
    (``None`` disables the discreteness constraint). ``rho`` and ``eps`` may be
    scalars or per-layer lists; ``eps=None`` means ``1e-3 * ||W_i||_F^2`` at
    initialization.
    """

    alphas: list | None = None
    bits: list | None = None
    rho: float | list = 1e-3
    eps: float | list | None = None
    mode: str = "sequential"
    discreteness: str | None = "quantize"
    max_iters: int = 30
    epochs_per_iter: int = 1
    batch_size: int = 128
    optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 1e-4})
    retrain_optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 1e-4})
    seed: int = 0
    # finalization
    retrain_max_epochs: int = 10
    retrain_patience: int = 3
    freeze_fraction: float = 0.2
    freeze_stop_fraction: float = 0.01
    retrain_epochs_per_step: float = 1.0
    cluster_retrain_epochs: int = 3
    kmeans_init: int = 10

    def __post_init__(self):
        if self.mode not in ("joint", "sequential"):
            raise ConfigError(f"mode must be 'joint' or 'sequential', got {self.mode!r}")
        if self.discreteness not in (None, "quantize", "cluster"):
            raise ConfigError(f"unknown discreteness kind {self.discreteness!r}")
        if not 0 < self.freeze_fraction <= 1:
            raise ConfigError("freeze_fraction must lie in (0, 1]")
        if self.max_iters < 0 or self.epochs_per_iter < 0:
            raise ConfigError("iteration counts must be non-negative")

    def per_layer(self, value, n, name):
        if value is None or np.isscalar(value):
            return [value] * n
        value = list(value)
        if len(value) != n:
            raise ConfigError(f"{name} has {len(value)} entries for {n} layers")
        return value

    def rhos(self, n):
        out = self.per_layer(self.rho, n, "rho")
        if any(r is None or r < 0 for r in out):
            raise ConfigError("rho must be >= 0")
        return [float(r) for r in out]

    def levels(self, n):
        """``M_i`` per layer, ``None`` where discreteness is disabled."""
        bits = self.per_layer(self.bits, n, "bits")
        return [None if b is None else 2 ** int(b) for b in bits]


@dataclass
class LayerState:
    """ADMM variables of one layer. ``W`` itself lives in the network."""

    Z: np.ndarray | None = None
    U: np.ndarray | None = None
    Y: np.ndarray | None = None
    V: np.ndarray | None = None
    mask: np.ndarray | None = None
    alpha: int | None = None
    spec: QuantSpec | ClusterSpec | None = None
    rho: float = 1e-3
    eps: float = math.inf


@dataclass
class ResidualReport:
    """Squared Frobenius residuals of one iteration; ``None`` for inactive terms."""

    iteration: int
    w_z: list
    z_drift: list
    w_y: list
    y_drift: list

    def rows(self):
        for i in range(len(self.w_z)):
            yield [self.iteration, i, self.w_z[i], self.z_drift[i], self.w_y[i], self.y_drift[i]]


def check_convergence(report, eps):
    """True iff every active residual of every layer is ``<= eps_i``."""
    eps = list(eps) if not np.isscalar(eps) else [eps] * len(report.w_z)
    for fam in (report.w_z, report.z_drift, report.w_y, report.y_drift):
        for r, e in zip(fam, eps):
            if r is not None and not r <= e:
                return False
    return True


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "layer", "w_minus_z", "z_drift", "w_minus_y", "y_drift"])
        for rep in trace:
            for row in rep.rows():
                w.writerow(["" if v is None else v for v in row])


def _sqnorm(a):
    a = np.asarray(a, dtype=np.float64)
    return float(np.dot(a.ravel(), a.ravel()))


def _threads():
    try:
        return max(1, int(os.environ.get("ADMMC_THREADS", "1")))
    except ValueError:
        return 1


def _map_layers(fn, items):
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(lambda it: fn(*it), items))


# ---------------------------------------------------------------------------
# subproblem 1
# ---------------------------------------------------------------------------


def augmented_grads(net, batch, labels, states, active):
    """Loss and gradients of the augmented Lagrangian used in subproblem 1.

    Adds ``rho_i (W_i - Z_i + U_i)`` (and/or the ``Y, V`` analogue) to the
    weight gradients. Layers with ``rho_i == 0`` get the plain loss gradient
    untouched.
    """
    if len(states) != len(net.params):
        raise ConfigError(f"{len(states)} layer states for {len(net.params)} trainable layers")
    loss, grads = nn.loss_and_grads(net, batch, labels)
    for p, g, st in zip(net.params, grads, states):
        if st.rho == 0:
            continue
        for key, center, dual in ((SPARSITY, st.Z, st.U), (DISCRETENESS, st.Y, st.V)):
            if key not in active or center is None:
                continue
            if center.shape != p["W"].shape:
                raise ConfigError(f"state shape {center.shape} != weight shape {p['W'].shape}")
            r = p["W"] - center + dual
            g["W"] = g["W"] + (st.rho * r).astype(g["W"].dtype, copy=False)
            loss += 0.5 * st.rho * _sqnorm(r)
    return loss, grads


class NetworkSubproblem:
    """Solves subproblem 1 for a network by a few epochs of mini-batch training.

    One optimizer and one RNG persist across ADMM iterations. ``masks``
    freezes pruned weights during the discreteness phase.
    """

    def __init__(self, net, train, states, active, config, masks=None, rng=None):
        self.net = net
        self.train = train
        self.states = states
        self.active = set(active)
        self.config = config
        self.masks = masks
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.opt = make_optimizer(config.optimizer)
        self.losses = []

    def grad_fn(self, net, x, y):
        return augmented_grads(net, x, y, self.states, self.active)

    def __call__(self, k):
        for e in range(self.config.epochs_per_iter):
            loss = train_epoch(
                self.net,
                self.train,
                self.opt,
                self.rng,
                self.config.batch_size,
                grad_fn=self.grad_fn,
                masks=self.masks,
                epoch=k,
            )
            self.losses.append(loss)


# ---------------------------------------------------------------------------
# core iteration
# ---------------------------------------------------------------------------


def _project_discrete(x, spec, mask):
    if isinstance(spec, QuantSpec):
        return project_quantize(x, spec, mask), spec
    return project_cluster(x, spec, mask)


def _update_layer(W, st, active):
    """Subproblems 2-3 and the dual updates for one layer (W is W^{k+1})."""
    w_z = z_drift = w_y = y_drift = None
    support = st.mask
    if SPARSITY in active and st.Z is not None:
        Z_new, support = project_sparsity(W + st.U, st.alpha)
        z_drift = _sqnorm(Z_new - st.Z)
        st.Z = Z_new
        st.U = st.U + W - st.Z
        w_z = _sqnorm(W - st.Z)
    if DISCRETENESS in active and st.spec is not None:
        Y_new, spec = _project_discrete(W + st.V, st.spec, support)
        y_drift = _sqnorm(Y_new - st.Y)
        st.Y = Y_new
        st.V = st.V + W - st.Y
        w_y = _sqnorm(W - st.Y)
        if isinstance(spec, ClusterSpec):
            # re-cluster the live weights and move each centroid to its cluster mean
            vals = W[support] if support is not None else W.ravel()
            if len(np.unique(vals)) > spec.M:
                c, labels, hist = lloyd_1d(vals, spec.centroids)
                order = np.argsort(c, kind="stable")
                spec = ClusterSpec(spec.M, c[order], np.argsort(order)[labels], False, hist)
        st.spec = spec
    return w_z, z_drift, w_y, y_drift


def run_admm(weights, states, solve_w, max_iters, active, callback=None):
    """Iterate subproblems 1-3 and the dual updates until convergence.

    ``weights`` are the live ``W_i`` arrays (updated in place by ``solve_w``).
    Returns the list of per-iteration :class:`ResidualReport`.
    """
    active = set(active)
    trace = []
    eps = [st.eps for st in states]
    for k in range(max_iters):
        solve_w(k)
        res = _map_layers(_update_layer, [(W, st, active) for W, st in zip(weights, states)])
        rep = ResidualReport(k + 1, *[list(col) for col in zip(*res)]) if res else ResidualReport(
            k + 1, [], [], [], []
        )
        trace.append(rep)
        if callback is not None:
            callback(k, rep, states)
        log.info("admm iter %d  |W-Z|^2 %s  |W-Y|^2 %s", k + 1, rep.w_z, rep.w_y)
        if check_convergence(rep, eps):
            break
    return trace


# ---------------------------------------------------------------------------
# state initialization
# ---------------------------------------------------------------------------


def _default_eps(W, eps):
    return 1e-3 * _sqnorm(W) if eps is None else float(eps)


def fit_specs(weights, masks, levels, kind, seed=0, n_init=10):
    """Initial QuantSpec (fitted interval) or ClusterSpec (k-means) per layer."""
    specs = []
    for i, (W, mk, M) in enumerate(zip(weights, masks, levels)):
        if M is None:
            specs.append(None)
        elif kind == "quantize":
            specs.append(QuantSpec(M, fit_interval(W, mk, M)))
        else:
            specs.append(init_centroids(W, mk, M, seed=seed + i, n_init=n_init))
    return specs


def init_states(weights, config, active, masks=None, specs=None):
    n = len(weights)
    alphas = config.per_layer(config.alphas, n, "alphas")
    rhos = config.rhos(n)
    eps = config.per_layer(config.eps, n, "eps")
    states = []
    for i, W in enumerate(weights):
        st = LayerState(rho=rhos[i], eps=_default_eps(W, eps[i]))
        st.mask = None if masks is None else masks[i]
        if SPARSITY in active:
            a = W.size if alphas[i] is None else int(alphas[i])
            if not 0 <= a <= W.size:
                raise ConfigError(f"alpha {a} outside [0, {W.size}] for layer {i}")
            st.alpha = a
            st.Z, support = project_sparsity(W, a)
            st.U = np.zeros_like(W)
        else:
            support = st.mask
        if DISCRETENESS in active and specs is not None and specs[i] is not None:
            st.spec = specs[i]
            st.Y, _ = _project_discrete(W, st.spec, support)
            st.V = np.zeros_like(W)
        states.append(st)
    return states


# ---------------------------------------------------------------------------
# network drivers
# ---------------------------------------------------------------------------


def _split(data):
    train, val = data
    return train, val


def admm_prune(net, config, data, callback=None, retrain=True):
    """ADMM weight pruning, hard projection, then masked retraining.

    Returns ``(net, masks, trace)``; ``net`` is modified in place. With
    ``retrain=False`` the caller runs :func:`masked_retrain` itself.
    """
    train, val = _split(data)
    states = init_states(net.weights, config, {SPARSITY})
    solver = NetworkSubproblem(net, train, states, {SPARSITY}, config)
    trace = run_admm(net.weights, states, solver, config.max_iters, {SPARSITY}, callback)
    masks = []
    for p, st in zip(net.params, states):
        p["W"][...], mk = project_sparsity(p["W"], st.alpha)
        masks.append(mk)
    if retrain:
        masked_retrain(
            net,
            masks,
            data,
            max_epochs=config.retrain_max_epochs,
            patience=config.retrain_patience,
            optimizer=config.retrain_optimizer,
            seed=config.seed + 1,
            batch_size=config.batch_size,
        )
    return net, masks, trace


def admm_discretize(net, masks, config, data, specs=None, callback=None):
    """ADMM quantization/clustering of the surviving weights.

    Only masked-in weights train; pruned weights stay exactly zero. Returns
    ``(net, specs, trace)`` with weights close to, but not yet exactly on,
    the levels/centroids.
    """
    train, _ = _split(data)
    n = len(net.params)
    levels = config.levels(n)
    if specs is None:
        specs = fit_specs(net.weights, masks, levels, config.discreteness, config.seed, config.kmeans_init)
    states = init_states(net.weights, config, {DISCRETENESS}, masks=masks, specs=specs)
    solver = NetworkSubproblem(net, train, states, {DISCRETENESS}, config, masks=masks)
    trace = run_admm(net.weights, states, solver, config.max_iters, {DISCRETENESS}, callback)
    return net, [st.spec for st in states], trace


def admm_joint(net, config, data, callback=None, finalize=True):
    """Pruning and discreteness constraints handled in one ADMM loop.

    With ``bits`` all ``None`` (or ``discreteness=None``) this reduces to the
    pruning half and follows the same trajectory as :func:`admm_prune`.
    Returns ``(net, masks, specs, trace)``.
    """
    train, _ = _split(data)
    n = len(net.params)
    levels = config.levels(n) if config.discreteness else [None] * n
    active = {SPARSITY}
    specs = [None] * n
    if any(M is not None for M in levels):
        active.add(DISCRETENESS)
        alphas = config.per_layer(config.alphas, n, "alphas")
        supports = [
            project_sparsity(W, W.size if a is None else a)[1] for W, a in zip(net.weights, alphas)
        ]
        specs = fit_specs(net.weights, supports, levels, config.discreteness, config.seed, config.kmeans_init)
    states = init_states(net.weights, config, active, specs=specs)
    solver = NetworkSubproblem(net, train, states, active, config)
    trace = run_admm(net.weights, states, solver, config.max_iters, active, callback)
    specs = [st.spec for st in states]
    masks = []
    for p, st in zip(net.params, states):
        p["W"][...], mk = project_sparsity(p["W"], st.alpha)
        masks.append(mk)
    if not finalize:
        return net, masks, specs, trace
    masked_retrain(
        net,
        masks,
        data,
        max_epochs=config.retrain_max_epochs,
        patience=config.retrain_patience,
        optimizer=config.retrain_optimizer,
        seed=config.seed + 1,
        batch_size=config.batch_size,
    )
    if DISCRETENESS in active:
        net, specs = finalize_discrete(net, masks, specs, config, data)
    return net, masks, specs, trace


def finalize_discrete(net, masks, specs, config, data):
    """Make every surviving weight exactly discrete (iterative freeze or centroid retraining)."""
    if config.discreteness == "cluster":
        net, specs = cluster_train_and_retrain(
            net,
            masks,
            specs,
            data,
            epochs=config.cluster_retrain_epochs,
            optimizer=config.retrain_optimizer,
            seed=config.seed + 2,
            batch_size=config.batch_size,
        )
        return net, specs
    net, _ = iterative_quantize(
        net,
        masks,
        specs,
        data,
        freeze_fraction=config.freeze_fraction,
        stop_fraction=config.freeze_stop_fraction,
        epochs_per_step=config.retrain_epochs_per_step,
        optimizer=config.retrain_optimizer,
        seed=config.seed + 2,
        batch_size=config.batch_size,
    )
    return net, specs
