"""Mini-batch training loops shared by baseline training, ADMM and retraining."""

from __future__ import annotations

import logging

import numpy as np

from . import nn
from .errors import DivergenceError
from .optim import flatten_grads, flatten_params

log = logging.getLogger(__name__)


def train_epoch(net, data, opt, rng, batch_size=128, grad_fn=None, masks=None, epoch=None):
    """One pass over ``data``; returns the mean mini-batch loss.

    ``grad_fn(net, x, y) -> (loss, grads)`` defaults to plain cross-entropy.
    ``masks`` holds one boolean array (or None) per trainable layer and
    restricts which weights may change; biases are always trained.
    """
    grad_fn = grad_fn or nn.loss_and_grads
    params = flatten_params(net)
    opt_masks = None
    if masks is not None:
        opt_masks = []
        for mk in masks:
            opt_masks.extend([mk, None])
    total, count = 0.0, 0
    for x, y in data.batches(batch_size, rng):
        loss, grads = grad_fn(net, x, y)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", iteration=epoch)
        opt.step(params, flatten_grads(grads), opt_masks)
        total += loss * len(y)
        count += len(y)
    return total / max(count, 1)


def evaluate(net, data):
    return nn.accuracy(net, data.images, data.labels)


def train(net, data, opt, epochs, seed=0, batch_size=128, val=None, masks=None):
    """Plain training for a fixed number of epochs; returns per-epoch history."""
    rng = np.random.default_rng(seed)
    history = []
    for ep in range(epochs):
        loss = train_epoch(net, data, opt, rng, batch_size, masks=masks, epoch=ep)
        row = {"epoch": ep, "loss": loss}
        if val is not None:
            row["val_acc"] = evaluate(net, val)
        log.info("epoch %d loss %.4f %s", ep, loss, row.get("val_acc", ""))
        history.append(row)
    return history
