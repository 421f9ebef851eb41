"""Batch command-line front end.

Every subcommand reads a JSON run config, writes its artifacts into
``--out`` and finishes with ``summary.json``. Failures exit with the code of
the raised :class:`~admmc.errors.AdmmcError` subclass.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np
from threadpoolctl import threadpool_limits

from . import codec, nn, pipeline
from .config import RunConfig, load_config
from .engine import write_trace_csv
from .errors import AdmmcError, ConfigError, InputError
from .training import evaluate

log = logging.getLogger("admmc")

CHECKPOINT = "model.ckpt"
MASKS = "masks.npz"
CODEBOOKS = "codebooks.json"
PACKED = "model.admmc"
SUMMARY = "summary.json"


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def save_masks(path, masks):
    np.savez(path, **{f"layer{i}": m.astype(bool) for i, m in enumerate(masks)})


def load_masks(path, net):
    with np.load(path) as z:
        masks = [z[f"layer{i}"].astype(bool) for i in range(len(net.params))]
    for m, p in zip(masks, net.params):
        if m.shape != p["W"].shape:
            raise ConfigError(f"mask shape {m.shape} does not match weight shape {p['W'].shape}")
    return masks


def save_codebooks(path, books):
    write_json(path, [None if b is None else b.to_dict() for b in books])


def load_codebooks(path):
    with open(path) as f:
        return [None if d is None else codec.Codebook.from_dict(d) for d in json.load(f)]


def _sibling(checkpoint, name):
    return os.path.join(os.path.dirname(os.path.abspath(checkpoint)), name)


def load_model(path):
    """Load a network from a checkpoint or a packed ``.admmc`` file.

    Returns ``(net, masks or None, codebooks or None)``.
    """
    if not path:
        raise InputError("this command needs --checkpoint")
    if not os.path.exists(path):
        raise InputError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        head = f.read(len(codec.MAGIC))
    if head == codec.MAGIC:
        return codec.load(path)
    net = nn.load_checkpoint(path)
    mpath = _sibling(path, MASKS)
    masks = load_masks(mpath, net) if os.path.exists(mpath) else None
    bpath = _sibling(path, CODEBOOKS)
    books = load_codebooks(bpath) if os.path.exists(bpath) else None
    return net, masks, books


def _masks_or_nonzero(net, masks):
    return masks if masks is not None else pipeline.masks_from_weights(net)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(cfg, args, out):
    splits = pipeline.load_splits(cfg, args.data_dir)
    net, summary = pipeline.train_baseline(cfg, splits)
    nn.save_checkpoint(net, os.path.join(out, CHECKPOINT))
    write_csv_rows(os.path.join(out, "train.csv"), summary.pop("history"))
    summary["checkpoint"] = CHECKPOINT
    return summary


def cmd_prune(cfg, args, out):
    if cfg.model.arch == "lstsq":
        return _toy(cfg, "prune")
    net, _, _ = load_model(args.checkpoint)
    splits = pipeline.load_splits(cfg, args.data_dir)
    net, masks, trace, summary = pipeline.prune(cfg, net, splits)
    nn.save_checkpoint(net, os.path.join(out, CHECKPOINT))
    save_masks(os.path.join(out, MASKS), masks)
    write_trace_csv(trace, os.path.join(out, "trace.csv"))
    summary.update(checkpoint=CHECKPOINT, masks=MASKS)
    return summary


def _discretize(cfg, args, out, kind):
    if args.checkpoint is None:
        raise InputError(f"{kind} needs --checkpoint pointing at a pruned model")
    cfg.discretize.kind = kind
    net, masks, _ = load_model(args.checkpoint)
    masks = _masks_or_nonzero(net, masks)
    splits = pipeline.load_splits(cfg, args.data_dir)
    net, specs, trace, summary, freeze_log = pipeline.discretize(cfg, net, masks, splits)
    return _write_discrete(net, masks, specs, trace, summary, out, freeze_log)


def _write_discrete(net, masks, specs, trace, summary, out, freeze_log=None):
    books = codec.make_codebooks(specs)
    nn.save_checkpoint(net, os.path.join(out, CHECKPOINT))
    save_masks(os.path.join(out, MASKS), masks)
    save_codebooks(os.path.join(out, CODEBOOKS), books)
    size = codec.save(os.path.join(out, PACKED), net, masks, books)
    write_trace_csv(trace, os.path.join(out, "trace.csv"))
    if freeze_log:
        write_csv_rows(os.path.join(out, "freeze.csv"), freeze_log)
    summary.update(
        checkpoint=CHECKPOINT,
        masks=MASKS,
        packed=PACKED,
        packed_bytes=size,
        report=codec.compute_ratios(codec.layer_stats(net, masks, books)),
    )
    return summary


def cmd_quantize(cfg, args, out):
    return _discretize(cfg, args, out, "quantize")


def cmd_cluster(cfg, args, out):
    return _discretize(cfg, args, out, "cluster")


def cmd_joint(cfg, args, out):
    if cfg.model.arch == "lstsq":
        return _toy(cfg, "joint")
    net, _, _ = load_model(args.checkpoint)
    splits = pipeline.load_splits(cfg, args.data_dir)
    net, masks, specs, trace, summary = pipeline.joint(cfg, net, splits)
    return _write_discrete(net, masks, specs, trace, summary, out)


def cmd_eval(cfg, args, out):
    net, masks, books = load_model(args.checkpoint)
    _, _, test = pipeline.load_splits(cfg, args.data_dir)
    summary = {"stage": "eval", "checkpoint": os.path.basename(args.checkpoint), "accuracy": evaluate(net, test)}
    summary["nonzero_weights"] = [int(np.count_nonzero(p["W"])) for p in net.params]
    return summary


def cmd_report(cfg, args, out):
    """Compression accounting from a stats fixture or from a saved model."""
    if cfg.model.arch == "lstsq" and args.stats is None and args.checkpoint is None:
        return _toy(cfg, "report")
    include = not args.exclude_codebook
    if args.stats:
        try:
            with open(args.stats) as f:
                fixture = json.load(f)
        except FileNotFoundError as exc:
            raise InputError(f"stats file not found: {args.stats}") from exc
        layers = fixture["layers"] if isinstance(fixture, dict) else fixture
        return {"stage": "report", "source": os.path.basename(args.stats), **codec.compute_ratios(layers, include)}
    net, masks, books = load_model(args.checkpoint)
    masks = _masks_or_nonzero(net, masks)
    books = books or [None] * len(net.params)
    report = codec.compute_ratios(codec.layer_stats(net, masks, books), include)
    return {"stage": "report", "source": os.path.basename(args.checkpoint), **report}


def cmd_pack(cfg, args, out):
    net, masks, books = load_model(args.checkpoint)
    masks = _masks_or_nonzero(net, masks)
    if books is None:
        books = [None] * len(net.params)
    size = codec.save(os.path.join(out, PACKED), net, masks, books)
    return {"stage": "pack", "packed": PACKED, "packed_bytes": size, "checkpoint_bytes": len(nn.checkpoint_bytes(net))}


def cmd_unpack(cfg, args, out):
    net, masks, books = load_model(args.checkpoint)
    nn.save_checkpoint(net, os.path.join(out, CHECKPOINT))
    save_masks(os.path.join(out, MASKS), masks)
    save_codebooks(os.path.join(out, CODEBOOKS), books)
    return {"stage": "unpack", "checkpoint": CHECKPOINT, "survivors": pipeline.survivor_counts(masks)}


def _toy(cfg, stage):
    # the toy problem has no checkpoints; every command runs the oracle comparison
    from .toy import oracle_report

    return oracle_report(cfg)


def write_csv_rows(path, rows):
    rows = list(rows)
    if not rows:
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


COMMANDS = {
    "train": (cmd_train, "train a baseline network"),
    "prune": (cmd_prune, "ADMM pruning plus masked retraining"),
    "quantize": (cmd_quantize, "ADMM quantization plus iterative freeze-and-retrain"),
    "cluster": (cmd_cluster, "ADMM clustering plus centroid-only retraining"),
    "joint": (cmd_joint, "pruning and quantization/clustering in one ADMM loop"),
    "eval": (cmd_eval, "test accuracy of a checkpoint or .admmc file"),
    "report": (cmd_report, "compression ratios for a model or a stats fixture"),
    "pack": (cmd_pack, "encode a checkpoint into the .admmc format"),
    "unpack": (cmd_unpack, "decode a .admmc file back into a checkpoint"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="admmc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--data-dir", help="directory with the MNIST IDX files")
        p.add_argument("--out", help="output directory (default: config out_dir or runs/<command>)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--checkpoint", help="input model (.ckpt or .admmc)")
        if name == "report":
            p.add_argument("--stats", help="JSON list of per-layer {numel, survivors, bits} stats")
            p.add_argument("--exclude-codebook", action="store_true", help="leave codebooks out of data size")
    return parser


def _set_threads():
    n = os.environ.get("ADMMC_THREADS")
    if not n:
        return
    try:
        limit = int(n)
    except ValueError as exc:
        raise ConfigError(f"ADMMC_THREADS must be an integer, got {n!r}") from exc
    threadpool_limits(limit)


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out or cfg.out_dir or os.path.join("runs", args.command)
    os.makedirs(out, exist_ok=True)
    _set_threads()
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    fn, _ = COMMANDS[args.command]
    summary = fn(cfg, args, out)
    summary = {"command": args.command, "recipe": cfg.recipe, "seed": cfg.seed, **summary}
    summary["timestamps"] = {
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "elapsed_seconds": time.perf_counter() - t0,
    }
    write_json(os.path.join(out, SUMMARY), summary)
    return summary


def main(argv=None):
    try:
        summary = run(argv)
    except AdmmcError as exc:
        print(f"admmc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"admmc: I/O error: {exc}", file=sys.stderr)
        return 7
    print(json.dumps({k: summary[k] for k in ("command", "recipe", "seed") if k in summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
