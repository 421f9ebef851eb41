"""Post-ADMM procedures that make the constraints hold exactly.

* :func:`masked_retrain` recovers accuracy after hard pruning.
* :func:`iterative_quantize` freezes weights onto their levels a fraction at
  a time, retraining the still-free weights in between.
* :func:`cluster_train_and_retrain` snaps weights to shared centroids and
  then trains only the centroid values.

All three return the best checkpoint by validation accuracy where a
validation split is given, so they never leave the network worse than they
found it on that split.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DivergenceError
from .optim import make_optimizer
from .projections import (
    ClusterSpec,
    _nearest_level_index,
    project_cluster,
    project_quantize,
    quant_levels,
)
from .training import evaluate, train_epoch

log = logging.getLogger(__name__)

RETRAIN_OPTIMIZER = {"kind": "adam", "lr": 1e-4}


def _snapshot(net):
    return [{k: v.copy() for k, v in p.items()} for p in net.params]


def _restore(net, snap):
    for p, s in zip(net.params, snap):
        for k in p:
            p[k][...] = s[k]


class _Subsampled:
    """View of a dataset that yields only the first ``n_batches`` shuffled batches."""

    def __init__(self, data, fraction):
        self.data = data
        self.fraction = fraction

    def batches(self, batch_size, rng=None):
        n = max(1, math.ceil(self.fraction * len(self.data) / batch_size))
        for i, b in enumerate(self.data.batches(batch_size, rng)):
            if i >= n:
                break
            yield b


def _epochs(train, epochs):
    """Split a possibly fractional epoch count into full passes plus a remainder."""
    whole = int(epochs)
    plan = [train] * whole
    if epochs - whole > 1e-9:
        plan.append(_Subsampled(train, epochs - whole))
    return plan


def masked_retrain(
    net,
    masks,
    data,
    max_epochs=10,
    patience=3,
    optimizer=None,
    seed=0,
    batch_size=128,
):
    """Retrain surviving weights only; pruned entries stay exactly zero.

    Stops after ``patience`` evaluations without validation improvement and
    restores the best checkpoint (the entry state counts as a candidate).
    """
    train, val = data
    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer or RETRAIN_OPTIMIZER)
    best_acc = evaluate(net, val) if val is not None else -1.0
    best = _snapshot(net)
    stale = 0
    for ep in range(max_epochs):
        train_epoch(net, train, opt, rng, batch_size, masks=masks, epoch=ep)
        if val is None:
            best = _snapshot(net)
            continue
        acc = evaluate(net, val)
        log.info("masked retrain epoch %d val %.4f (best %.4f)", ep, acc, best_acc)
        if acc > best_acc:
            best_acc, best, stale = acc, _snapshot(net), 0
        else:
            stale += 1
            if stale >= patience:
                break
    _restore(net, best)
    return net


# ---------------------------------------------------------------------------
# iterative quantization
# ---------------------------------------------------------------------------


@dataclass
class FreezeState:
    """Per-layer frozen flags; frozen weights already sit exactly on a level."""

    frozen: list
    iteration: int = 0
    history: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def counts(self):
        return [int(f.sum()) for f in self.frozen]


def select_freeze(w, free, spec, fraction):
    """Pick, for every level, the ``ceil(fraction * n)`` free weights closest to it.

    ``n`` is the number of free weights whose nearest level is that level.
    Weights already exactly on a level are always selected. Returns a boolean
    array shaped like ``w``.
    """
    pos = quant_levels(spec.q, spec.M, w.dtype)
    idx = np.flatnonzero(free.ravel())
    chosen = np.zeros(w.size, dtype=bool)
    if idx.size == 0:
        return chosen.reshape(w.shape)
    vals = w.ravel()[idx]
    k = _nearest_level_index(np.abs(vals), pos)
    # signed level id: 0..K-1 negative side, K..2K-1 positive side
    K = len(pos)
    level_id = np.where(vals < 0, K - 1 - k, K + k)
    dist = np.abs(np.abs(vals) - pos[k])
    on_level = dist == 0
    chosen[idx[on_level]] = True
    order = np.lexsort((idx, dist, level_id))
    lid_sorted = level_id[order]
    starts = np.searchsorted(lid_sorted, np.arange(2 * K), side="left")
    ends = np.searchsorted(lid_sorted, np.arange(2 * K), side="right")
    for s, e in zip(starts, ends):
        n = e - s
        if n:
            take = order[s : s + math.ceil(fraction * n)]
            chosen[idx[take]] = True
    return chosen.reshape(w.shape)


def iterative_quantize(
    net,
    masks,
    specs,
    data,
    freeze_fraction=0.2,
    stop_fraction=0.01,
    epochs_per_step=1.0,
    optimizer=None,
    seed=0,
    batch_size=128,
    max_steps=200,
):
    """Freeze-and-retrain quantization; every survivor ends exactly on a level.

    Each step freezes ``freeze_fraction`` of the free weights nearest every
    level, then retrains the free remainder. Once fewer than
    ``stop_fraction`` of the survivors are free, the rest are quantized in
    one shot. ``freeze_fraction=1`` is the single-shot projection.
    Returns ``(net, freeze_state)``; ``freeze_state.log`` has one row per step.
    """
    train, val = data
    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer or RETRAIN_OPTIMIZER)
    state = FreezeState([np.zeros(p["W"].shape, dtype=bool) for p in net.params])
    layers = [i for i, s in enumerate(specs) if s is not None]
    survivors = sum(int(masks[i].sum()) for i in layers)
    rows = state.log
    while True:
        state.iteration += 1
        for i in layers:
            W = net.params[i]["W"]
            free = masks[i] & ~state.frozen[i]
            new = select_freeze(W, free, specs[i], freeze_fraction)
            W[new] = project_quantize(W, specs[i], new)[new]
            state.frozen[i] |= new
        n_free = sum(int((masks[i] & ~state.frozen[i]).sum()) for i in layers)
        state.history.append(state.counts())
        row = {"iteration": state.iteration, "frozen": survivors - n_free, "free": n_free}
        if n_free < stop_fraction * survivors or n_free == 0 or state.iteration >= max_steps:
            rows.append(row)
            break
        train_masks = [
            (masks[i] & ~state.frozen[i]) if specs[i] is not None else masks[i] for i in range(len(masks))
        ]
        for plan in _epochs(train, epochs_per_step):
            train_epoch(net, plan, opt, rng, batch_size, masks=train_masks, epoch=state.iteration)
        if val is not None:
            row["val_acc"] = evaluate(net, val)
        log.info("freeze step %s", row)
        rows.append(row)
    for i in layers:
        W = net.params[i]["W"]
        W[...] = project_quantize(W, specs[i], masks[i])
        state.frozen[i] = masks[i].copy()
    state.history.append(state.counts())
    if val is not None:
        rows.append({"iteration": state.iteration + 1, "frozen": survivors, "free": 0, "val_acc": evaluate(net, val)})
    return net, state


# ---------------------------------------------------------------------------
# clustering with centroid-only retraining
# ---------------------------------------------------------------------------


def centroid_grads(dW, mask, assignment, M):
    """Gradient w.r.t. each shared centroid: the sum over its member weights."""
    return np.bincount(assignment, weights=dW[mask].astype(np.float64), minlength=M)


def cluster_train_and_retrain(
    net,
    masks,
    specs,
    data,
    epochs=3,
    optimizer=None,
    seed=0,
    batch_size=128,
    check_cohesion=False,
):
    """Snap survivors to centroids, then train centroids (and biases) only.

    Assignments are frozen; each centroid moves by the summed gradient of its
    members so all members stay bit-identical. Returns ``(net, specs)`` with
    the best-validation checkpoint restored.
    """
    train, val = data
    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer or RETRAIN_OPTIMIZER)
    layers = [i for i, s in enumerate(specs) if s is not None]
    cents, assigns = {}, {}
    new_specs = list(specs)
    for i in layers:
        W = net.params[i]["W"]
        _, spec = project_cluster(W, specs[i], masks[i])
        c = spec.centroids.astype(W.dtype)
        cents[i], assigns[i] = c, spec.assignment
        W[masks[i]] = c[spec.assignment]
        new_specs[i] = spec

    def sync_specs():
        for i in layers:
            s = new_specs[i]
            new_specs[i] = ClusterSpec(s.M, cents[i].astype(np.float64), assigns[i], s.degenerate)

    best_acc = evaluate(net, val) if val is not None else -1.0
    best = (_snapshot(net), {i: c.copy() for i, c in cents.items()})
    for ep in range(epochs):
        for x, y in train.batches(batch_size, rng):
            loss, grads = nn.loss_and_grads(net, x, y)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss in centroid retraining, epoch {ep}", iteration=ep)
            params, gs = [], []
            for i, (p, g) in enumerate(zip(net.params, grads)):
                if i in cents:
                    params.append(cents[i])
                    gs.append(centroid_grads(g["W"], masks[i], assigns[i], len(cents[i])).astype(p["W"].dtype))
                else:
                    params.append(p["W"])
                    gs.append(g["W"] if masks[i] is None else g["W"] * masks[i])
                params.append(p["b"])
                gs.append(g["b"])
            opt.step(params, gs)
            for i in layers:
                net.params[i]["W"][masks[i]] = cents[i][assigns[i]]
            if check_cohesion:
                for i in layers:
                    vals = net.params[i]["W"][masks[i]]
                    assert np.array_equal(vals, cents[i][assigns[i]])
        if val is not None:
            acc = evaluate(net, val)
            log.info("centroid retrain epoch %d val %.4f", ep, acc)
            if acc > best_acc:
                best_acc = acc
                best = (_snapshot(net), {i: c.copy() for i, c in cents.items()})
        else:
            best = (_snapshot(net), {i: c.copy() for i, c in cents.items()})
    _restore(net, best[0])
    cents.update(best[1])
    sync_specs()
    return net, new_specs
