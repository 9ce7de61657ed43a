"""Space-filling designs and uniform sampling over a non-implausible region."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .errors import AcceptanceTooLow, SamplerStuck

MIN_ACCEPTANCE = 0.01


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def latin_hypercube(n, dims, rng):
    """One random Latin hypercube on [0, 1]^dims."""
    cells = np.argsort(rng.random((n, dims)), axis=0)
    return (cells + rng.random((n, dims))) / n


def maximin_lhs(n, dims, seed=None, K=100, lower=-1.0, upper=1.0):
    """Best of ``K`` random Latin hypercubes by minimum pairwise Euclidean distance."""
    if n < 1:
        return np.empty((0, dims))
    rng = _rng(seed)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (dims,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (dims,))
    best, best_d = None, -np.inf
    for _ in range(max(1, K)):
        U = latin_hypercube(n, dims, rng)
        d = pdist(U).min() if n > 1 else 0.0
        if d > best_d:
            best, best_d = U, d
    return lower + best * (upper - lower)


def grid_design(n, lower, upper):
    """Equally spaced points including both ends (one-dimensional examples)."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if len(lower) != 1:
        raise ValueError("grid designs are one-dimensional")
    return np.linspace(lower[0], upper[0], n)[:, None]


@dataclass
class Region:
    """A bounding box intersected with a sequence of wave cuts.

    Each cut must provide ``accepts(X) -> bool array``.  Membership is
    evaluated lazily: later cuts only see points surviving earlier ones.
    """

    lower: np.ndarray
    upper: np.ndarray
    cuts: list = field(default_factory=list)

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise ValueError("invalid bounding box")
        self.cuts = list(self.cuts)

    @classmethod
    def box(cls, dims, lower=-1.0, upper=1.0):
        return cls(np.full(dims, float(lower)), np.full(dims, float(upper)))

    @property
    def dims(self):
        return len(self.lower)

    def in_box(self, X):
        X = np.atleast_2d(X)
        return np.all((X >= self.lower) & (X <= self.upper), axis=1)

    def contains(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mask = self.in_box(X)
        for cut in self.cuts:
            idx = np.flatnonzero(mask)
            if len(idx) == 0:
                break
            mask[idx] = cut.accepts(X[idx])
        return mask

    def with_cut(self, cut):
        return Region(self.lower, self.upper, self.cuts + [cut])

    def shrink_to(self, points, pad=0.1):
        """Bounding box of ``points`` padded by ``pad`` of its extent, within the old box."""
        points = np.atleast_2d(points)
        if len(points) == 0:
            return Region(self.lower, self.upper, self.cuts)
        lo, hi = points.min(0), points.max(0)
        width = hi - lo
        width = np.where(width > 0, width, self.upper - self.lower)
        return Region(np.maximum(self.lower, lo - pad * width),
                      np.minimum(self.upper, hi + pad * width), self.cuts)

    def volume_ratio(self, other):
        """Bounding-box volume of ``self`` relative to ``other``."""
        return float(np.prod((self.upper - self.lower) / (other.upper - other.lower)))


def rejection_design(region, n, seed=None, K=100, min_acceptance=MIN_ACCEPTANCE,
                     check_after=None, max_candidates=None):
    """Keep members of successive maximin hypercubes (size n) over the bounding box.

    Raises AcceptanceTooLow (carrying the members found so far) when the
    running acceptance falls below ``min_acceptance`` once ``check_after``
    candidates have been tried, or when ``max_candidates`` is exhausted.
    """
    if n < 1:
        return np.empty((0, region.dims))
    rng = _rng(seed)
    check_after = max(10 * n, 1000) if check_after is None else check_after
    max_candidates = int(np.ceil(2 * n / min_acceptance)) if max_candidates is None else max_candidates
    kept, tried, found = [], 0, 0
    while found < n:
        X = maximin_lhs(n, region.dims, rng, K, region.lower, region.upper)
        m = region.contains(X)
        kept.append(X[m])
        tried += n
        found += int(m.sum())
        rate = found / tried
        if found < n and ((tried >= check_after and rate < min_acceptance) or tried >= max_candidates):
            members = np.vstack(kept)
            raise AcceptanceTooLow(
                f"acceptance {rate:.4g} after {tried} candidates ({found} members)",
                accepted=members, rate=rate)
    return np.vstack(kept)[:n]


def uniform_rejection(region, n, seed=None, batch=None, min_acceptance=MIN_ACCEPTANCE,
                      check_after=None, max_candidates=None):
    """Plain uniform draws over the bounding box, kept if members."""
    if n < 1:
        return np.empty((0, region.dims))
    rng = _rng(seed)
    batch = batch or max(n, 1000)
    check_after = max(10 * n, 1000) if check_after is None else check_after
    max_candidates = int(np.ceil(2 * n / min_acceptance)) if max_candidates is None else max_candidates
    kept, tried, found = [], 0, 0
    while found < n:
        X = rng.uniform(region.lower, region.upper, (batch, region.dims))
        m = region.contains(X)
        kept.append(X[m])
        tried += batch
        found += int(m.sum())
        rate = found / tried
        if found < n and ((tried >= check_after and rate < min_acceptance) or tried >= max_candidates):
            raise AcceptanceTooLow(
                f"acceptance {rate:.4g} after {tried} candidates ({found} members)",
                accepted=np.vstack(kept), rate=rate)
    return np.vstack(kept)[:n]


def _lag_corr(chains, lag):
    """Largest per-coordinate lag autocorrelation, pooled over chains (steps x chains x dims)."""
    x = chains - chains.mean(0, keepdims=True)
    var = np.mean(x ** 2, axis=(0, 1))
    cov = np.mean(x[lag:] * x[:-lag], axis=(0, 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(var > 0, cov / var, 0.0)
    return float(np.max(r))


def mcmc_uniform(region, n, seed=None, start_points=None, n_chains=32, burn_in=1000,
                 adapt_block=50, accept_range=(0.2, 0.4), max_lag_corr=0.5,
                 thin_target=0.1, pilot=1000, max_thin=2000, return_info=False):
    """Approximately uniform samples on ``region`` by random-walk Metropolis.

    The target is the region's indicator, so a proposal is accepted exactly
    when it is a member.  Per-dimension steps (proportional to the box
    widths) are adapted toward ``accept_range`` during burn-in and then
    frozen.  Thinning is the smallest lag whose pooled autocorrelation in
    every coordinate is below ``thin_target`` (never above ``max_lag_corr``).
    """
    dims = region.dims
    if n <= 0:
        out = np.empty((0, dims))
        return (out, {"thin": 0, "acceptance": float("nan")}) if return_info else out
    rng = _rng(seed)
    if start_points is None or len(np.atleast_2d(start_points)) == 0:
        raise ValueError("mcmc_uniform needs at least one member start point")
    starts = np.atleast_2d(np.asarray(start_points, dtype=float))
    starts = starts[region.contains(starts)]
    if len(starts) == 0:
        raise ValueError("no start point lies in the region")
    n_chains = max(1, min(n_chains, n))
    pick = rng.choice(len(starts), n_chains, replace=len(starts) < n_chains)
    state = starts[pick].copy()
    width = region.upper - region.lower
    step = 0.1 * np.where(width > 0, width, 1.0)
    lo_rate, hi_rate = accept_range

    def advance(state, step):
        prop = state + rng.normal(size=state.shape) * step
        ok = region.contains(prop)
        state[ok] = prop[ok]
        return int(ok.sum())

    total_acc = 0
    block_acc = 0
    for t in range(1, burn_in + 1):
        a = advance(state, step)
        total_acc += a
        block_acc += a
        if t % adapt_block == 0:
            rate = block_acc / (adapt_block * n_chains)
            if rate < lo_rate:
                step *= 0.6 if rate < lo_rate / 2 else 0.8
            elif rate > hi_rate:
                step *= 1.5 if rate > 2 * hi_rate else 1.25
            step = np.minimum(step, np.where(width > 0, width, 1.0))
            block_acc = 0
    if total_acc == 0:
        raise SamplerStuck("no chain moved during burn-in; reduce the initial step "
                           "or supply more start points")

    # pilot run at the frozen step to choose the thinning interval
    trace = np.empty((pilot, n_chains, dims))
    acc = 0
    for t in range(pilot):
        acc += advance(state, step)
        trace[t] = state
    if acc == 0:
        raise SamplerStuck("chains stopped moving after adaptation; reduce the step")
    thin = 1
    while thin < min(max_thin, pilot // 4) and _lag_corr(trace, thin) >= thin_target:
        thin += 1 if thin < 10 else max(1, thin // 10)
    if _lag_corr(trace, thin) >= max_lag_corr:
        thin = max_thin

    per_chain = -(-n // n_chains)
    out = np.empty((per_chain, n_chains, dims))
    for i in range(per_chain):
        for _ in range(thin):
            acc += advance(state, step)
        out[i] = state
    samples = out.transpose(1, 0, 2).reshape(-1, dims)[:n]
    if return_info:
        return samples, {"thin": thin, "step": step.tolist(), "n_chains": n_chains,
                         "acceptance": acc / ((pilot + per_chain * thin) * n_chains)}
    return samples


def sample_region(region, n, seed=None, start_points=None, **mcmc_kw):
    """Uniform sample: rejection while acceptance is at least 1%, MCMC otherwise."""
    rng = _rng(seed)
    try:
        return uniform_rejection(region, n, rng), "rejection"
    except AcceptanceTooLow as err:
        starts = err.accepted
        if start_points is not None:
            starts = np.vstack([starts, np.atleast_2d(start_points)])
        return mcmc_uniform(region, n, rng, starts, **mcmc_kw), "mcmc"


def maximin_subset(points, n, seed=None, K=100):
    """Greedy farthest-point subsets from ``K`` random starts; keeps the best by minimum distance."""
    points = np.atleast_2d(points)
    if n >= len(points):
        return points.copy()
    rng = _rng(seed)
    scale = points.std(0)
    P = points / np.where(scale > 0, scale, 1.0)
    best, best_d = None, -np.inf
    for start in rng.choice(len(P), min(K, len(P)), replace=False):
        idx = [int(start)]
        d = np.linalg.norm(P - P[start], axis=1)
        for _ in range(n - 1):
            j = int(np.argmax(d))
            idx.append(j)
            d = np.minimum(d, np.linalg.norm(P - P[j], axis=1))
        md = pdist(P[idx]).min() if n > 1 else 0.0
        if md > best_d:
            best, best_d = idx, md
    return points[best]


def pool_design(region, n, seed=None, pool=None, start_points=None, **mcmc_kw):
    """Maximin subset of a large uniform sample of the region."""
    rng = _rng(seed)
    pool = pool or max(100 * n, 1000)
    S, how = sample_region(region, pool, rng, start_points=start_points, **mcmc_kw)
    return maximin_subset(S, n, rng), f"pool-{how}"


def region_design(region, n, seed=None, start_points=None, **mcmc_kw):
    """Run design: maximin-with-rejection, falling back to MCMC samples."""
    rng = _rng(seed)
    try:
        return rejection_design(region, n, rng), "rejection"
    except AcceptanceTooLow as err:
        starts = err.accepted
        if start_points is not None and len(start_points):
            starts = np.vstack([starts, np.atleast_2d(start_points)])
        return mcmc_uniform(region, n, rng, starts, **mcmc_kw), "mcmc"
