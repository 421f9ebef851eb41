import json
from pathlib import Path

import numpy as np
import pytest

from admmc import codec, nn
from admmc.cli import main

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "recipe": "tiny",
    "seed": 3,
    "data": {"source": "synthetic", "n": 600, "classes": 4, "dim": 16, "val_size": 100, "spread": 0.15},
    "model": {"arch": "mlp", "sizes": [16, 20, 4]},
    "train": {"epochs": 3, "batch_size": 64},
    "optimizer": {"kind": "adam", "lr": 0.01},
    "admm": {"rho": 0.01, "max_iters": 2, "lr": 0.001},
    "prune": {"alphas": [60, 20]},
    "discretize": {"bits": 2, "max_iters": 2, "epochs_per_step": 0.5, "cluster_retrain_epochs": 1},
    "retrain": {"max_epochs": 2, "lr": 0.001},
}


def _summary(d):
    return json.loads((Path(d) / "summary.json").read_text())


def _strip(summary):
    return {k: v for k, v in summary.items() if k != "timestamps"}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    out = {k: root / k for k in ("train", "prune", "quantize", "cluster", "pack", "unpack", "eval_q", "eval_u")}
    assert main(["train", *c, "--out", str(out["train"])]) == 0
    assert main(["prune", *c, "--out", str(out["prune"]), "--checkpoint", str(out["train"] / "model.ckpt")]) == 0
    for kind in ("quantize", "cluster"):
        assert main([kind, *c, "--out", str(out[kind]), "--checkpoint", str(out["prune"] / "model.ckpt")]) == 0
    assert main(["pack", *c, "--out", str(out["pack"]), "--checkpoint", str(out["quantize"] / "model.ckpt")]) == 0
    assert main(["unpack", *c, "--out", str(out["unpack"]), "--checkpoint", str(out["pack"] / "model.admmc")]) == 0
    assert main(["eval", *c, "--out", str(out["eval_q"]), "--checkpoint", str(out["quantize"] / "model.ckpt")]) == 0
    assert main(["eval", *c, "--out", str(out["eval_u"]), "--checkpoint", str(out["unpack"] / "model.ckpt")]) == 0
    return root, cfg, out


def test_train_summary_has_baseline(runs):
    _, _, out = runs
    s = _summary(out["train"])
    assert s["command"] == "train" and s["recipe"] == "tiny" and s["seed"] == 3
    assert 0 <= s["baseline_accuracy"] <= 1
    assert (out["train"] / "train.csv").exists()
    assert set(s["timestamps"]) == {"started", "finished", "elapsed_seconds"}


def test_prune_survivors_echo_alphas(runs):
    _, _, out = runs
    s = _summary(out["prune"])
    assert s["survivors"] == TINY["prune"]["alphas"] == s["alphas"]
    assert (out["prune"] / "trace.csv").read_text().startswith("iteration,layer,w_minus_z")


def test_discrete_stages_write_exact_artifacts(runs):
    _, _, out = runs
    for kind in ("quantize", "cluster"):
        s = _summary(out[kind])
        net, masks, books = codec.load(out[kind] / "model.admmc")
        assert s["packed_bytes"] == (out[kind] / "model.admmc").stat().st_size
        ckpt = nn.load_checkpoint(out[kind] / "model.ckpt")
        for p, q, m, b in zip(ckpt.params, net.params, masks, books):
            assert np.array_equal(p["W"], q["W"])
            assert set(np.unique(p["W"][m]).tolist()) <= set(b.entries.tolist())
    assert (out["quantize"] / "freeze.csv").exists()


def test_unpack_of_pack_evaluates_identically(runs):
    _, _, out = runs
    a, b = _summary(out["eval_q"]), _summary(out["eval_u"])
    assert a["accuracy"] == b["accuracy"]
    assert a["nonzero_weights"] == b["nonzero_weights"]


def test_determinism_modulo_timestamps(runs, tmp_path):
    _, cfg, out = runs
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert _strip(_summary(tmp_path)) == _strip(_summary(out["train"]))
    assert (tmp_path / "model.ckpt").read_bytes() == (out["train"] / "model.ckpt").read_bytes()


def test_report_on_layer_stats_fixture(tmp_path):
    stats = ROOT / "recipes" / "lenet5-layer-stats.json"
    assert main(["report", "--stats", str(stats), "--out", str(tmp_path)]) == 0
    s = _summary(tmp_path)
    direct = codec.compute_ratios(json.loads(stats.read_text())["layers"])
    assert s["baseline_bytes"] == direct["baseline_bytes"] == 1_722_000
    assert s["data_ratio"] == pytest.approx(direct["data_ratio"], rel=1e-15)
    assert main(["report", "--stats", str(stats), "--exclude-codebook", "--out", str(tmp_path)]) == 0
    assert _summary(tmp_path)["data_size_bytes"] < direct["data_size_bytes"]


def test_toy_recipe(tmp_path):
    assert main(["prune", "--config", str(ROOT / "recipes" / "toy-convex-oracle.json"), "--out", str(tmp_path)]) == 0
    s = _summary(tmp_path)
    assert s["prune"]["gap"] <= 0.05 and s["joint"]["gap"] <= 0.10


def test_all_recipes_validate():
    from admmc.config import load_config

    for path in (ROOT / "recipes").glob("*.json"):
        if path.name.endswith("-stats.json"):
            continue
        load_config(path)


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path)]) == 3
    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"not a checkpoint at all")
    assert main(["eval", "--checkpoint", str(garbage), "--out", str(tmp_path)]) == 5
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["quantize", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    assert main(["train", "--config", str(cfg), "--data-dir", str(tmp_path), "--out", str(tmp_path)]) == 0
    mnist = dict(TINY, data={"source": "mnist"})
    cfg.write_text(json.dumps(mnist))
    assert main(["train", "--config", str(cfg), "--data-dir", str(tmp_path / "empty"), "--out", str(tmp_path)]) != 0
    err = capsys.readouterr().err
    assert "ConfigError" in err and "InputError" in err
