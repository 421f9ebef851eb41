"""Euclidean projections onto the pruning and discreteness constraint sets.

Three projections are provided:

* :func:`project_sparsity` keeps the ``alpha`` largest-magnitude entries.
* :func:`project_quantize` snaps surviving entries to the nearest of the
  symmetric equal-distance levels ``{±q, ±2q, ..., ±(M/2)q}``.
* :func:`project_cluster` snaps surviving entries to the mean of their
  nearest-centroid cluster (one Lloyd step on the flattened layer).

"Surviving" entries are the ones selected by a boolean mask; everything else
is written as exact zero. :func:`fit_interval` picks the quantization
interval ``q`` that minimizes the squared quantization error, and
:func:`init_centroids` seeds the clustering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError


def _full_mask(t, mask):
    if mask is None:
        return np.ones(t.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != t.shape:
        raise ConfigError(f"mask shape {mask.shape} does not match tensor {t.shape}")
    return mask


# ---------------------------------------------------------------------------
# sparsity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SparsityConstraint:
    alpha: int

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")


def project_sparsity(t, alpha):
    """Keep the ``alpha`` entries of largest magnitude, zero the rest.

    Ties at the cut-off magnitude keep the lower flat (row-major) index.
    Returns ``(projected, mask)``.
    """
    t = np.asarray(t)
    n = t.size
    alpha = int(alpha)
    if not 0 <= alpha <= n:
        raise ConfigError(f"alpha={alpha} outside [0, {n}]")
    flat = t.ravel()
    # stable sort on -|t| puts equal magnitudes in index order
    order = np.argsort(-np.abs(flat), kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:alpha]] = True
    mask = mask.reshape(t.shape)
    return np.where(mask, t, np.zeros((), dtype=t.dtype)), mask


# ---------------------------------------------------------------------------
# equal-distance quantization
# ---------------------------------------------------------------------------


def quant_levels(q, M, dtype=np.float32):
    """Positive half of the level set, ``[q, 2q, ..., (M/2)q]`` in ``dtype``.

    Every consumer (projection, finalization, codec) builds levels through
    this function, so the float values agree bit-for-bit.
    """
    dtype = np.dtype(dtype)
    return np.arange(1, M // 2 + 1, dtype=dtype) * dtype.type(q)


@dataclass(frozen=True)
class QuantSpec:
    M: int
    q: float

    def __post_init__(self):
        if self.M < 2 or self.M % 2:
            raise ConfigError(f"level count M must be even and >= 2, got {self.M}")
        if not self.q > 0:
            raise ConfigError(f"interval q must be positive, got {self.q}")

    @property
    def bits(self):
        return int(np.ceil(np.log2(self.M)))

    def levels(self, dtype=np.float32):
        """Full sorted level set ``[-(M/2)q, ..., -q, q, ..., (M/2)q]``."""
        pos = quant_levels(self.q, self.M, dtype)
        return np.concatenate([-pos[::-1], pos])


def _nearest_level_index(a, pos):
    """Index into ``pos`` of the level nearest each magnitude in ``a``.

    Exact midpoints go to the larger level (round half away from zero).
    """
    K = len(pos)
    q = pos[0]
    k0 = np.clip(np.floor(a / q + 0.5).astype(np.int64) - 1, 0, K - 1)
    best = k0.copy()
    best_d = np.abs(a - pos[k0])
    for off in (-1, 1):
        cand = np.clip(k0 + off, 0, K - 1)
        d = np.abs(a - pos[cand])
        better = (d < best_d) | ((d == best_d) & (cand > best))
        best = np.where(better, cand, best)
        best_d = np.where(better, d, best_d)
    return best


def project_quantize(t, spec, mask=None):
    """Map every surviving entry to its nearest quantization level."""
    t = np.asarray(t)
    mask = _full_mask(t, mask)
    out = np.zeros_like(t)
    w = t[mask]
    if w.size == 0:
        return out
    pos = quant_levels(spec.q, spec.M, t.dtype)
    a = np.abs(w)
    k = _nearest_level_index(a, pos)
    # sign(0) counts as positive: both neighbours are equally far
    out[mask] = np.where(w < 0, -pos[k], pos[k])
    return out


def quantization_sse(w, q, M):
    """Total squared error of quantizing ``w`` with interval ``q`` (float64)."""
    w = np.asarray(w, dtype=np.float64)
    pos = quant_levels(q, M, np.float64)
    a = np.abs(w)
    k = _nearest_level_index(a, pos)
    return float(np.sum((a - pos[k]) ** 2))


def fit_interval(t, mask, M):
    """Interval ``q`` minimizing the squared quantization error of the survivors.

    For a fixed assignment of magnitudes to level multiples ``k_j`` the error
    ``sum (|w_j| - k_j q)^2`` is a parabola in ``q`` with vertex
    ``sum k_j |w_j| / sum k_j^2``. Assignments only change at the breakpoints
    ``q = |w_j| / (m + 1/2)``, so sweeping the breakpoints from large ``q``
    to small and clipping each vertex into its interval visits the global
    minimum exactly.
    """
    t = np.asarray(t)
    mask = _full_mask(t, mask)
    if M < 2 or M % 2:
        raise ConfigError(f"level count M must be even and >= 2, got {M}")
    a = np.abs(t[mask].astype(np.float64))
    if a.size == 0:
        raise DegenerateInputError("fit_interval needs at least one surviving weight")
    if not np.any(a > 0):
        raise DegenerateInputError("all surviving weights are zero; interval undefined")
    K = M // 2
    s0 = float(np.sum(a * a))
    s1_top, s2_top = float(a.sum()), float(a.size)

    if K > 1:
        m = np.arange(1, K, dtype=np.float64)
        bp = (a[:, None] / (m[None, :] + 0.5)).ravel()
        d1 = np.repeat(a, K - 1)
        d2 = np.tile(2.0 * m + 1.0, a.size)
        keep = bp > 0
        bp, d1, d2 = bp[keep], d1[keep], d2[keep]
        order = np.argsort(-bp, kind="stable")
        bp, d1, d2 = bp[order], d1[order], d2[order]
        s1 = np.concatenate([[s1_top], s1_top + np.cumsum(d1)])
        s2 = np.concatenate([[s2_top], s2_top + np.cumsum(d2)])
        hi = np.concatenate([[np.inf], bp])
        lo = np.concatenate([bp, [0.0]])
    else:
        s1, s2 = np.array([s1_top]), np.array([s2_top])
        hi, lo = np.array([np.inf]), np.array([0.0])

    qs = np.clip(s1 / s2, lo, hi)
    qs = np.where(qs > 0, qs, np.maximum(hi * 0.5, np.finfo(float).tiny))
    sse = s0 - 2.0 * qs * s1 + qs * qs * s2
    # the expanded form cancels badly near zero error; rescore the best few directly
    cand = np.unique(qs[np.argsort(sse, kind="stable")[:8]])
    exact = [quantization_sse(a, q, M) for q in cand]
    return float(cand[int(np.argmin(exact))])


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


@dataclass
class ClusterSpec:
    M: int
    centroids: np.ndarray
    assignment: np.ndarray | None = None
    degenerate: bool = False
    sse_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError("cluster count must be >= 1")
        self.centroids = np.asarray(self.centroids, dtype=np.float64)


def _assign(values, centroids):
    """Nearest centroid for each value; ties go to the lower centroid index."""
    order = np.argsort(centroids, kind="stable")
    c = centroids[order]
    mids = 0.5 * (c[:-1] + c[1:])
    lab_sorted = np.searchsorted(mids, values, side="left")
    return order[lab_sorted]


def _reseed_empty(values, labels, centroids):
    """Move the value farthest from its centroid into each empty cluster."""
    M = len(centroids)
    counts = np.bincount(labels, minlength=M)
    for j in np.flatnonzero(counts == 0):
        dist = np.abs(values - centroids[labels])
        # a point alone in its cluster cannot be moved without emptying it
        movable = counts[labels] > 1
        dist = np.where(movable, dist, -1.0)
        i = int(np.argmax(dist))
        if dist[i] <= 0:
            break
        counts[labels[i]] -= 1
        labels[i] = j
        counts[j] = 1
        centroids[j] = values[i]
    return labels, centroids


def _cluster_means(values, labels, centroids):
    M = len(centroids)
    counts = np.bincount(labels, minlength=M)
    sums = np.bincount(labels, weights=values, minlength=M)
    out = centroids.copy()
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz]
    return out


def _sse(values, labels, centroids):
    return float(np.sum((values - centroids[labels]) ** 2))


def lloyd_1d(values, centroids, max_iter=300):
    """Lloyd iterations on scalar data until the assignment stops changing.

    Returns ``(centroids, labels, sse_history)`` where ``sse_history[i]`` is
    the within-cluster SSE after the i-th mean update.
    """
    values = np.asarray(values, dtype=np.float64)
    c = np.array(centroids, dtype=np.float64)
    labels = _assign(values, c)
    labels, c = _reseed_empty(values, labels, c)
    history = []
    for _ in range(max_iter):
        c = _cluster_means(values, labels, c)
        history.append(_sse(values, labels, c))
        new = _assign(values, c)
        new, c = _reseed_empty(values, new, c)
        if np.array_equal(new, labels):
            break
        labels = new
    return c, labels, history


def _kmeanspp_seed(values, M, rng):
    n = len(values)
    c = np.empty(M)
    c[0] = values[rng.integers(n)]
    d2 = (values - c[0]) ** 2
    for j in range(1, M):
        total = d2.sum()
        if total <= 0:
            c[j:] = c[0]
            break
        c[j] = values[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, (values - c[j]) ** 2)
    return c


def optimal_1d_centroids(values, M):
    """Globally optimal 1-D k-means by dynamic programming over sorted values.

    Optimal 1-D clusters are contiguous runs of the sorted data, so
    ``D[m, j] = min_i D[m-1, i] + cost(i, j)`` over prefix boundaries finds
    the exact minimum. O(M n^2) memory-light; meant for a few thousand values.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = len(x)
    s1 = np.concatenate([[0.0], np.cumsum(x)])
    s2 = np.concatenate([[0.0], np.cumsum(x * x)])
    i = np.arange(n + 1)

    def cost_to(j):
        # SSE of x[i:j] for every i < j
        cnt = j - i[:j]
        seg = s1[j] - s1[:j]
        return np.maximum(s2[j] - s2[:j] - seg * seg / cnt, 0.0)

    D = np.full((M + 1, n + 1), np.inf)
    arg = np.zeros((M + 1, n + 1), dtype=np.int64)
    D[0, 0] = 0.0
    for j in range(1, n + 1):
        c = cost_to(j)
        for m in range(1, min(M, j) + 1):
            tot = D[m - 1, :j] + c
            k = int(np.argmin(tot))
            D[m, j], arg[m, j] = tot[k], k
    cents, j = [], n
    for m in range(M, 0, -1):
        k = arg[m, j]
        cents.append((s1[j] - s1[k]) / (j - k))
        j = k
    return np.array(cents[::-1])


# exact DP seeding is used as an extra candidate up to this many survivors
EXACT_1D_LIMIT = 2000


def _padded_distinct(values, M):
    distinct = np.unique(values)
    pad = np.resize(distinct, M) if len(distinct) else np.zeros(M)
    return np.sort(pad), len(distinct) < M


def init_centroids(t, mask, M, seed=0, n_init=10):
    """k-means++ seeded Lloyd clustering of the surviving weights.

    The best of ``n_init`` seeded runs (lowest SSE), plus one run started
    from the exact 1-D optimum when the layer is small, is returned as a
    :class:`ClusterSpec` with sorted centroids. With fewer than ``M`` distinct
    surviving values the distinct values are returned, padded by repetition,
    and ``degenerate`` is set.
    """
    t = np.asarray(t)
    mask = _full_mask(t, mask)
    values = t[mask].astype(np.float64)
    if len(np.unique(values)) <= M:
        centroids, degenerate = _padded_distinct(values, M)
        return ClusterSpec(M, centroids, _assign(values, centroids), degenerate)
    rng = np.random.default_rng(seed)
    starts = [_kmeanspp_seed(values, M, rng) for _ in range(n_init)]
    if len(values) <= EXACT_1D_LIMIT:
        starts.append(optimal_1d_centroids(values, M))
    best = None
    for c0 in starts:
        c, labels, hist = lloyd_1d(values, c0)
        if best is None or hist[-1] < best[2][-1]:
            best = (c, labels, hist)
    c, labels, hist = best
    order = np.argsort(c, kind="stable")
    rank = np.empty(M, dtype=np.int64)
    rank[order] = np.arange(M)
    return ClusterSpec(M, c[order], rank[labels], False, hist)


def project_cluster(t, spec, mask=None):
    """Assign surviving entries to their nearest centroid and replace each by
    its cluster mean. Returns ``(projected, updated_spec)``."""
    t = np.asarray(t)
    mask = _full_mask(t, mask)
    out = np.zeros_like(t)
    values = t[mask].astype(np.float64)
    M = spec.M
    if len(np.unique(values)) <= M:
        centroids, degenerate = _padded_distinct(values, M)
        out[mask] = t[mask]
        return out, ClusterSpec(M, centroids, _assign(values, centroids), degenerate)
    c = np.array(spec.centroids, dtype=np.float64)
    if len(c) != M:
        raise ConfigError(f"spec has {len(c)} centroids, expected {M}")
    labels = _assign(values, c)
    before = _sse(values, labels, c)
    labels, c = _reseed_empty(values, labels, c)
    c = _cluster_means(values, labels, c)
    out[mask] = c[labels].astype(t.dtype)
    return out, ClusterSpec(M, c, labels, False, [before, _sse(values, labels, c)])
