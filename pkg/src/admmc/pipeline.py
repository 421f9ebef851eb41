"""Glue between run configs, datasets, the ADMM engine and finalization."""

from __future__ import annotations

import logging
import os
import time

import numpy as np

from . import codec, nn
from .data import load_mnist, synthetic_blobs, train_val_split
from .engine import CompressionConfig, admm_discretize, admm_joint, admm_prune, finalize_discrete
from .errors import ConfigError, InputError
from .finalize import cluster_train_and_retrain, iterative_quantize, masked_retrain
from .optim import make_optimizer
from .training import evaluate, train

log = logging.getLogger(__name__)

DEFAULT_DATA_DIR = os.environ.get("ADMMC_DATA_DIR", "data/mnist")


def build_model(cfg):
    arch = cfg.model.arch
    if arch == "mlp":
        return nn.mlp(cfg.model.sizes, seed=cfg.seed)
    if arch == "lenet5":
        return nn.lenet5(seed=cfg.seed)
    raise ConfigError(f"architecture {arch!r} is not a network")


def load_splits(cfg, data_dir=None):
    """``(train, val, test)`` for the configured data source."""
    if cfg.data.source == "synthetic":
        d = cfg.data
        full = synthetic_blobs(d.n, d.classes, d.dim, seed=cfg.seed, spread=d.spread)
        test = synthetic_blobs(
            max(1, d.n // 4), d.classes, d.dim, seed=cfg.seed, spread=d.spread, split="test", sample_seed=1
        )
        train, val = train_val_split(full, min(d.val_size, len(full) // 5), seed=cfg.seed)
        return train, val, test
    data_dir = data_dir or cfg.data_dir or DEFAULT_DATA_DIR
    if not os.path.isdir(data_dir):
        raise InputError(f"MNIST directory not found: {data_dir}")
    full = load_mnist(data_dir, "train")
    test = load_mnist(data_dir, "test")
    if cfg.data.train_limit:
        full = full.subset(np.arange(min(cfg.data.train_limit, len(full))))
    train, val = train_val_split(full, cfg.data.val_size, seed=cfg.seed)
    return train, val, test


def _alphas(cfg, net):
    sizes = [W.size for W in net.weights]
    if cfg.prune.alphas is not None:
        if len(cfg.prune.alphas) != len(sizes):
            raise ConfigError(f"prune.alphas has {len(cfg.prune.alphas)} entries for {len(sizes)} layers")
        return [s if a is None else int(a) for a, s in zip(cfg.prune.alphas, sizes)]
    if cfg.prune.keep_fractions is not None:
        if len(cfg.prune.keep_fractions) != len(sizes):
            raise ConfigError("prune.keep_fractions length does not match layer count")
        return [s if f is None else int(round(f * s)) for f, s in zip(cfg.prune.keep_fractions, sizes)]
    return list(sizes)


def _bits(cfg, n):
    b = cfg.discretize.bits
    if isinstance(b, int):
        return [b] * n
    if len(b) != n:
        raise ConfigError(f"discretize.bits has {len(b)} entries for {n} layers")
    return list(b)


def compression_config(cfg, net, stage="prune"):
    n = len(net.params)
    base = cfg.optimizer.model_dump()
    return CompressionConfig(
        alphas=_alphas(cfg, net),
        bits=_bits(cfg, n),
        rho=cfg.admm.rho,
        eps=cfg.admm.eps,
        mode=cfg.admm.mode,
        discreteness=cfg.discretize.kind,
        max_iters=(
            cfg.discretize.max_iters
            if stage == "discretize" and cfg.discretize.max_iters is not None
            else cfg.admm.max_iters
        ),
        epochs_per_iter=cfg.admm.epochs_per_iter,
        batch_size=cfg.train.batch_size,
        optimizer={**base, "lr": cfg.admm.lr},
        retrain_optimizer={**base, "lr": cfg.retrain.lr},
        seed=cfg.seed,
        retrain_max_epochs=cfg.retrain.max_epochs,
        retrain_patience=cfg.retrain.patience,
        freeze_fraction=cfg.discretize.freeze_fraction,
        freeze_stop_fraction=cfg.discretize.freeze_stop_fraction,
        retrain_epochs_per_step=cfg.discretize.epochs_per_step,
        cluster_retrain_epochs=cfg.discretize.cluster_retrain_epochs,
        kmeans_init=cfg.discretize.kmeans_init,
    )


def masks_from_weights(net):
    return [p["W"] != 0 for p in net.params]


def survivor_counts(masks):
    return [int(np.count_nonzero(m)) for m in masks]


def train_baseline(cfg, splits):
    train_set, val, test = splits
    net = build_model(cfg)
    opt = make_optimizer(cfg.optimizer.model_dump())
    history = train(net, train_set, opt, cfg.train.epochs, seed=cfg.seed, batch_size=cfg.train.batch_size, val=val)
    summary = {
        "stage": "train",
        "baseline_val_accuracy": evaluate(net, val) if len(val) else None,
        "baseline_accuracy": evaluate(net, test),
        "epochs": cfg.train.epochs,
        "history": history,
    }
    return net, summary


def prune(cfg, net, splits):
    """ADMM pruning plus masked retraining. ``net`` is modified in place."""
    train_set, val, test = splits
    cc = compression_config(cfg, net, "prune")
    acc_before = evaluate(net, test)
    net, masks, trace = admm_prune(net, cc, (train_set, val), retrain=False)
    acc_projected = evaluate(net, test)
    masked_retrain(
        net,
        masks,
        (train_set, val),
        max_epochs=cc.retrain_max_epochs,
        patience=cc.retrain_patience,
        optimizer=cc.retrain_optimizer,
        seed=cc.seed + 1,
        batch_size=cc.batch_size,
    )
    acc_after = evaluate(net, test)
    summary = {
        "stage": "prune",
        "alphas": cc.alphas,
        "survivors": survivor_counts(masks),
        "accuracy_before": acc_before,
        "accuracy_hard_projected": acc_projected,
        "accuracy_after": acc_after,
        "admm_iterations": len(trace),
        "final_residuals": _final_residuals(trace),
    }
    return net, masks, trace, summary


def discretize(cfg, net, masks, splits, freeze_fraction=None):
    """Sequential ADMM quantization/clustering followed by exact finalization."""
    train_set, val, test = splits
    cc = compression_config(cfg, net, "discretize")
    if freeze_fraction is not None:
        cc.freeze_fraction = freeze_fraction
    acc_before = evaluate(net, test)
    net, specs, trace = admm_discretize(net, masks, cc, (train_set, val))
    acc_admm = evaluate(net, test)
    freeze_log = None
    if cc.discreteness == "cluster":
        net, specs = cluster_train_and_retrain(
            net,
            masks,
            specs,
            (train_set, val),
            epochs=cc.cluster_retrain_epochs,
            optimizer=cc.retrain_optimizer,
            seed=cc.seed + 2,
            batch_size=cc.batch_size,
        )
    else:
        net, state = iterative_quantize(
            net,
            masks,
            specs,
            (train_set, val),
            freeze_fraction=cc.freeze_fraction,
            stop_fraction=cc.freeze_stop_fraction,
            epochs_per_step=cc.retrain_epochs_per_step,
            optimizer=cc.retrain_optimizer,
            seed=cc.seed + 2,
            batch_size=cc.batch_size,
        )
        freeze_log = state.log
    summary = {
        "stage": cc.discreteness,
        "bits": cc.bits,
        "survivors": survivor_counts(masks),
        "accuracy_before": acc_before,
        "accuracy_admm": acc_admm,
        "accuracy_after": evaluate(net, test),
        "admm_iterations": len(trace),
        "final_residuals": _final_residuals(trace),
        "codebooks": [_spec_summary(s) for s in specs],
    }
    return net, specs, trace, summary, freeze_log


def joint(cfg, net, splits):
    train_set, val, test = splits
    cc = compression_config(cfg, net, "prune")
    acc_before = evaluate(net, test)
    net, masks, specs, trace = admm_joint(net, cc, (train_set, val))
    summary = {
        "stage": "joint",
        "alphas": cc.alphas,
        "bits": cc.bits,
        "survivors": survivor_counts(masks),
        "accuracy_before": acc_before,
        "accuracy_after": evaluate(net, test),
        "admm_iterations": len(trace),
        "final_residuals": _final_residuals(trace),
        "codebooks": [_spec_summary(s) for s in specs],
    }
    return net, masks, specs, trace, summary


def _final_residuals(trace):
    if not trace:
        return None
    r = trace[-1]
    return {"iteration": r.iteration, "w_z": r.w_z, "z_drift": r.z_drift, "w_y": r.w_y, "y_drift": r.y_drift}


def _spec_summary(spec):
    if spec is None:
        return None
    if hasattr(spec, "q"):
        return {"kind": "quant", "M": spec.M, "q": spec.q}
    return {"kind": "cluster", "M": spec.M, "centroids": [float(c) for c in spec.centroids]}


def desk_scale_run(cfg, splits, log_fn=None):
    """Baseline -> ADMM prune -> {iterative quant, single-shot quant, cluster}.

    The three discretization arms start from the same pruned network; the two
    quantization arms also share the same ADMM-quantized starting point.
    Returns a dict of test accuracies and timings.
    """
    t0 = time.perf_counter()
    say = log_fn or (lambda *a: None)
    train_set, val, test = splits
    net, s_train = train_baseline(cfg, splits)
    res = {"seed": cfg.seed, "baseline": s_train["baseline_accuracy"]}
    say(f"seed {cfg.seed}: baseline {res['baseline']:.4f}")

    net, masks, _, s_prune = prune(cfg, net, splits)
    res.update(
        pruned=s_prune["accuracy_after"],
        pruned_hard=s_prune["accuracy_hard_projected"],
        survivors=s_prune["survivors"],
        alphas=s_prune["alphas"],
    )
    say(f"seed {cfg.seed}: pruned {res['pruned']:.4f} (hard projection {res['pruned_hard']:.4f})")

    qcfg = cfg.model_copy(deep=True)
    qcfg.discretize.kind = "quantize"
    qnet = net.copy()
    cc = compression_config(qcfg, qnet, "discretize")
    qnet, qspecs, _ = admm_discretize(qnet, masks, cc, (train_set, val))
    res["quant_admm"] = evaluate(qnet, test)
    single = qnet.copy()
    qnet, _ = finalize_discrete(qnet, masks, qspecs, cc, (train_set, val))
    res["quant"] = evaluate(qnet, test)
    cc_single = compression_config(qcfg, single, "discretize")
    cc_single.freeze_fraction = 1.0
    single, _ = finalize_discrete(single, masks, qspecs, cc_single, (train_set, val))
    res["quant_single_shot"] = evaluate(single, test)
    say(f"seed {cfg.seed}: quant {res['quant']:.4f} single-shot {res['quant_single_shot']:.4f}")

    ccfg = cfg.model_copy(deep=True)
    ccfg.discretize.kind = "cluster"
    cnet = net.copy()
    cc = compression_config(ccfg, cnet, "discretize")
    cnet, cspecs, _ = admm_discretize(cnet, masks, cc, (train_set, val))
    cnet, cspecs = finalize_discrete(cnet, masks, cspecs, cc, (train_set, val))
    res["cluster"] = evaluate(cnet, test)
    say(f"seed {cfg.seed}: cluster {res['cluster']:.4f}")

    res["nets"] = {"quant": (qnet, masks, qspecs), "cluster": (cnet, masks, cspecs)}
    res["seconds"] = time.perf_counter() - t0
    return res


def pack_stats(net, masks, specs):
    books = codec.make_codebooks(specs)
    return codec.compute_ratios(codec.layer_stats(net, masks, books))
