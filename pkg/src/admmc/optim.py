"""SGD and Adam over lists of parameter arrays, with optional binary masks.

Masked-out entries are left untouched bit-for-bit, and so are their Adam
moments: an entry that is frozen now and released later resumes from the
moments it had when it was frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")

    def step(self, params, grads, masks=None):
        """Update ``params`` in place and return them."""
        if len(params) != len(grads):
            raise ConfigError(f"{len(params)} params but {len(grads)} grads")
        if masks is None:
            masks = [None] * len(params)
        masks = [None if mk is None else np.asarray(mk, dtype=bool) for mk in masks]
        for p, g, mk in zip(params, grads, masks):
            if p.shape != g.shape or (mk is not None and mk.shape != p.shape):
                raise ConfigError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        self.t += 1
        if self.kind == "sgd":
            for p, g, mk in zip(params, grads, masks):
                upd = (self.lr * g).astype(p.dtype, copy=False)
                if mk is None:
                    p -= upd
                else:
                    np.subtract(p, upd, out=p, where=mk)
            return params

        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, g, m, v, mk in zip(params, grads, self.m, self.v, masks):
            m_new = b1 * m + (1.0 - b1) * g
            v_new = b2 * v + (1.0 - b2) * (g * g)
            upd = (self.lr / bc1) * m_new / (np.sqrt(v_new / bc2) + self.eps)
            upd = upd.astype(p.dtype, copy=False)
            if mk is None:
                m[...] = m_new
                v[...] = v_new
                p -= upd
            else:
                np.copyto(m, m_new, where=mk)
                np.copyto(v, v_new, where=mk)
                np.subtract(p, upd, out=p, where=mk)
        return params


def make_optimizer(cfg=None, **overrides):
    """Build an :class:`OptimizerState` from a config mapping (``kind``, ``lr``, ...)."""
    opts = dict(cfg or {})
    opts.update(overrides)
    return OptimizerState(
        kind=opts.get("kind", "adam"),
        lr=float(opts.get("lr", 1e-3)),
        beta1=float(opts.get("beta1", 0.9)),
        beta2=float(opts.get("beta2", 0.999)),
        eps=float(opts.get("eps", 1e-8)),
    )


def flatten_params(net, include_bias=True):
    """Parameter list in the fixed order W0, b0, W1, b1, ... used by the trainers."""
    out = []
    for p in net.params:
        out.append(p["W"])
        if include_bias:
            out.append(p["b"])
    return out


def flatten_grads(grads, include_bias=True):
    out = []
    for g in grads:
        out.append(g["W"])
        if include_bias:
            out.append(g["b"])
    return out
