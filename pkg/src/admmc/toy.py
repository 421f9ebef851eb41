"""Least-squares toy problems with exact subproblem solves.

The loss ``f(x) = 0.5 ||A x - b||^2`` is convex, so subproblem 1 of every
ADMM iteration has a closed-form solution and the whole run is
deterministic. Small instances are also cheap to solve by enumeration
(:func:`best_subset`, :func:`best_subset_discrete`), which gives an exact
reference for the non-convex constrained optimum.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .engine import DISCRETENESS, SPARSITY, CompressionConfig, fit_specs, init_states, run_admm
from .errors import ConfigError
from .projections import QuantSpec, project_quantize, project_sparsity


@dataclass
class LstsqProblem:
    A: np.ndarray
    b: np.ndarray
    x_true: np.ndarray | None = None

    @property
    def n(self):
        return self.A.shape[1]

    def objective(self, x):
        r = self.A @ x - self.b
        return 0.5 * float(r @ r)

    def solve(self, support=None):
        """Unconstrained minimizer, or the minimizer restricted to ``support``."""
        x = np.zeros(self.n)
        if support is None:
            support = np.ones(self.n, dtype=bool)
        if support.any():
            x[support] = np.linalg.lstsq(self.A[:, support], self.b, rcond=None)[0]
        return x


def make_lstsq(n_samples=40, n_features=8, alpha=3, noise=0.1, seed=0):
    """Random ``A`` with a planted ``alpha``-sparse signal plus Gaussian noise."""
    if not 0 <= alpha <= n_features:
        raise ConfigError(f"alpha {alpha} outside [0, {n_features}]")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n_samples, n_features))
    x = np.zeros(n_features)
    idx = rng.choice(n_features, alpha, replace=False)
    x[idx] = rng.choice([-1.0, 1.0], alpha) * rng.uniform(0.8, 1.5, alpha)
    b = A @ x + noise * rng.standard_normal(n_samples)
    return LstsqProblem(A, b, x)


@dataclass
class ToyResult:
    x: np.ndarray
    support: np.ndarray
    objective: float
    trace: list
    spec: QuantSpec | None = None
    x_admm: np.ndarray | None = None
    history: dict = field(default_factory=dict)


class ExactSubproblem:
    """Closed-form subproblem 1: ``(A'A + k rho I) x = A'b + rho sum(center - dual)``.

    With ``support`` set, coordinates outside it are held at zero.
    """

    def __init__(self, problem, x, state, active, support=None):
        self.p = problem
        self.x = x
        self.st = state
        self.active = set(active)
        self.support = np.ones(problem.n, dtype=bool) if support is None else support

    def __call__(self, k):
        st, s = self.st, self.support
        A = self.p.A[:, s]
        lhs = A.T @ A
        rhs = A.T @ self.p.b
        for key, center, dual in ((SPARSITY, st.Z, st.U), (DISCRETENESS, st.Y, st.V)):
            if key in self.active and center is not None:
                lhs = lhs + st.rho * np.eye(len(rhs))
                rhs = rhs + st.rho * (center - dual)[s]
        self.x[...] = 0.0
        self.x[s] = np.linalg.solve(lhs, rhs)


def _config(alpha, bits, rho, eps, kind="quantize"):
    return CompressionConfig(alphas=[alpha], bits=[bits], rho=rho, eps=eps, discreteness=kind)


def refit_interval(problem, x, spec, support):
    """Best ``q`` for the fixed level multipliers of ``x`` (closed form).

    ``x = q * m`` with integer multipliers ``m``; the loss is quadratic in
    ``q`` so the optimum is ``a.b / a.a`` with ``a = A m``.
    """
    m = np.zeros_like(x)
    m[support] = np.rint(x[support] / spec.q)
    a = problem.A @ m
    den = float(a @ a)
    if den == 0:
        return x, spec
    q = float(a @ problem.b) / den
    if q <= 0:
        return x, spec
    return q * m, QuantSpec(spec.M, q)


def toy_prune(problem, alpha, rho=80.0, max_iters=200, eps=1e-10, x0=None):
    """Sequential-mode pruning: ADMM, hard projection, exact re-solve on the support."""
    x = problem.solve() if x0 is None else np.array(x0, dtype=np.float64)
    cfg = _config(alpha, None, rho, eps)
    states = init_states([x], cfg, {SPARSITY})
    trace = run_admm([x], states, ExactSubproblem(problem, x, states[0], {SPARSITY}), max_iters, {SPARSITY})
    x_admm = x.copy()
    _, support = project_sparsity(x, alpha)
    xf = problem.solve(support)
    return ToyResult(xf, support, problem.objective(xf), trace, x_admm=x_admm)


def toy_discretize(problem, x, support, bits, rho=80.0, max_iters=200, eps=1e-10):
    """Quantization ADMM on a fixed support, then exact projection and interval refit."""
    x = np.array(x, dtype=np.float64)
    cfg = _config(None, bits, rho, eps)
    specs = fit_specs([x], [support], cfg.levels(1), "quantize")
    states = init_states([x], cfg, {DISCRETENESS}, masks=[support], specs=specs)
    st = states[0]
    initial = float(np.sum((x - st.Y) ** 2))
    solver = ExactSubproblem(problem, x, st, {DISCRETENESS}, support)
    trace = run_admm([x], states, solver, max_iters, {DISCRETENESS})
    x_admm = x.copy()
    xq = project_quantize(x_admm, st.spec, support)
    xq, spec = refit_interval(problem, xq, st.spec, support)
    res = ToyResult(xq, support, problem.objective(xq), trace, spec=spec, x_admm=x_admm)
    res.history["initial_w_y"] = initial
    return res


def toy_joint(problem, alpha, bits, rho=80.0, max_iters=200, eps=1e-10, x0=None):
    """Joint pruning + quantization in one ADMM loop, then exact projection.

    The final support comes from the sparsity projection; surviving entries
    are snapped to the levels and the interval is refit in closed form.
    """
    x = problem.solve() if x0 is None else np.array(x0, dtype=np.float64)
    cfg = _config(alpha, bits, rho, eps)
    _, support0 = project_sparsity(x, alpha)
    specs = fit_specs([x], [support0], cfg.levels(1), "quantize")
    active = {SPARSITY, DISCRETENESS}
    states = init_states([x], cfg, active, specs=specs)
    st = states[0]
    trace = run_admm([x], states, ExactSubproblem(problem, x, st, active), max_iters, active)
    x_admm = x.copy()
    _, support = project_sparsity(x, alpha)
    xq = project_quantize(x, st.spec, support)
    xq, spec = refit_interval(problem, xq, st.spec, support)
    return ToyResult(xq, support, problem.objective(xq), trace, spec=spec, x_admm=x_admm)


# ---------------------------------------------------------------------------
# enumeration oracles
# ---------------------------------------------------------------------------


def best_subset(problem, alpha):
    """Exact best ``alpha``-subset least squares. Returns ``(objective, x)``."""
    best = (np.inf, None)
    for sup in itertools.combinations(range(problem.n), alpha):
        s = np.zeros(problem.n, dtype=bool)
        s[list(sup)] = True
        x = problem.solve(s)
        f = problem.objective(x)
        if f < best[0]:
            best = (f, x)
    return best


def best_subset_discrete(problem, alpha, M):
    """Exact optimum over supports and level multipliers, ``q`` solved in closed form.

    Cost is ``C(n, alpha) * M**alpha`` small least-squares solves.
    """
    mults = [m for m in range(-(M // 2), M // 2 + 1) if m != 0]
    best = (np.inf, None)
    for sup in itertools.combinations(range(problem.n), alpha):
        cols = problem.A[:, list(sup)]
        for pattern in itertools.product(mults, repeat=alpha):
            a = cols @ np.asarray(pattern, dtype=np.float64)
            den = float(a @ a)
            if den == 0:
                continue
            q = max(float(a @ problem.b) / den, 0.0)
            x = np.zeros(problem.n)
            x[list(sup)] = q * np.asarray(pattern, dtype=np.float64)
            f = problem.objective(x)
            if f < best[0]:
                best = (f, x)
    return best


def oracle_report(cfg):
    """Run both toy modes against their enumeration oracles (``cfg`` is a RunConfig)."""
    t = cfg.toy
    p = make_lstsq(t.n_samples, t.n_features, t.alpha, t.noise, seed=cfg.seed)
    pr = toy_prune(p, t.alpha, rho=t.rho)
    f_subset, _ = best_subset(p, t.alpha)
    M = 2**t.bits
    jr = toy_joint(p, t.alpha, t.bits, rho=t.rho)
    f_disc, _ = best_subset_discrete(p, t.alpha, M)
    return {
        "stage": "toy",
        "prune": {
            "objective": pr.objective,
            "oracle": f_subset,
            "gap": pr.objective / f_subset - 1.0,
            "support": np.flatnonzero(pr.support).tolist(),
            "admm_iterations": len(pr.trace),
        },
        "joint": {
            "objective": jr.objective,
            "oracle": f_disc,
            "gap": jr.objective / f_disc - 1.0,
            "M": M,
            "q": jr.spec.q,
            "support": np.flatnonzero(jr.support).tolist(),
            "admm_iterations": len(jr.trace),
        },
    }
