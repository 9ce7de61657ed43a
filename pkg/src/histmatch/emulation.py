"""Bayes linear emulators: regression mean plus a Gaussian-correlated residual.

An emulator for one output is

    f(x) = sum_j beta_j g_j(x_A) + u(x_A) + w(x)

where ``x_A`` are the active inputs, ``u`` has covariance
``sigma_u2 * exp(-sum(((x - x') / theta)**2))`` over the active inputs and
``w`` is a nugget with variance ``sigma_w2`` on exactly coincident points.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import FitError

FORMAT_VERSION = 1
THETA_GRID = np.geomspace(0.2, 20.0, 15)
NUGGET_GRID = (0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 0.95)
STRATEGIES = ("linear", "fixed", "grouped")


def _as_2d(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _row_keys(X):
    return [r.tobytes() for r in np.ascontiguousarray(X, dtype=float)]


# --------------------------------------------------------------------------- data


@dataclass
class TrainingSet:
    """Design points (n x d) and one output column (n)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = _as_2d(self.X)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if len(self.X) != len(self.y):
            raise ValueError("X and y lengths differ")
        if not np.all(np.isfinite(self.y)) or not np.all(np.isfinite(self.X)):
            raise ValueError("training data contains non-finite values")
        if len(set(_row_keys(self.X))) != len(self.X):
            raise ValueError("training design has duplicate points")

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<f8").tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------------- basis


def basis_matrix(X, terms):
    """Columns for each term: () constant, (i,) linear, (i, j) product."""
    X = _as_2d(X)
    G = np.empty((len(X), len(terms)))
    for c, t in enumerate(terms):
        if len(t) == 0:
            G[:, c] = 1.0
        elif len(t) == 1:
            G[:, c] = X[:, t[0]]
        else:
            G[:, c] = X[:, t[0]] * X[:, t[1]]
    return G


def _term_str(t):
    return "1" if not t else "*".join(f"x{i}" for i in t)


@dataclass
class MeanFit:
    active: tuple
    terms: tuple
    coef: np.ndarray
    residual_variance: float
    rss: float
    n: int

    def predict(self, X):
        if not self.terms:
            return np.zeros(len(_as_2d(X)))
        return basis_matrix(X, self.terms) @ self.coef


def _drop_collinear(G, terms, tol=1e-10):
    keep = []
    for c in range(G.shape[1]):
        trial = keep + [c]
        if np.linalg.matrix_rank(G[:, trial], tol=tol * max(1.0, np.abs(G).max())) == len(trial):
            keep.append(c)
    if len(keep) < len(terms):
        dropped = [_term_str(terms[c]) for c in range(len(terms)) if c not in keep]
        warnings.warn(f"dropping collinear basis terms {dropped}", RuntimeWarning, stacklevel=3)
    return keep


def _forward(G, y, cand_cols, n_cand, max_add, rss0, tss, n, gamma):
    """Greedy additions judged by an extended BIC; returns chosen candidate indices."""
    chosen = []
    rss = rss0
    penalty = np.log(n) + 2.0 * gamma * np.log(max(n_cand, 1))
    remaining = list(range(cand_cols.shape[1]))
    while remaining and len(chosen) < max_add and rss > 1e-12 * tss and G.shape[1] < n - 1:
        Q, _ = np.linalg.qr(G)
        r = y - Q @ (Q.T @ y)
        Z = cand_cols[:, remaining]
        Zp = Z - Q @ (Q.T @ Z)
        norms = np.einsum("ij,ij->j", Zp, Zp)
        scale = np.einsum("ij,ij->j", Z, Z)
        ok = norms > 1e-10 * np.maximum(scale, 1e-300)
        if not np.any(ok):
            break
        gains = np.where(ok, (r @ Zp) ** 2 / np.where(ok, norms, 1.0), -np.inf)
        b = int(np.argmax(gains))
        new_rss = max(rss - gains[b], 0.0)
        exact = new_rss <= 1e-12 * tss
        if not exact and n * np.log(new_rss / rss) + penalty >= 0.0:
            break
        c = remaining.pop(b)
        chosen.append(c)
        G = np.column_stack([G, cand_cols[:, c]])
        rss = new_rss
    return chosen, G, rss


def fit_mean_and_actives(X, y, candidates=None, *, max_actives=12, second_order=True,
                         max_terms=None, gamma=1.0, mean="stepwise", prior_variance=None):
    """Select active inputs and a polynomial mean by forward stepwise regression.

    First-order terms are added greedily while the extended BIC improves, up
    to ``max_actives``; then squares and pairwise products of the actives
    compete the same way.  ``mean="zero"`` skips regression entirely: every
    candidate is active and the residual variance is ``prior_variance``.
    """
    X = _as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    n, d = X.shape
    candidates = tuple(range(d)) if candidates is None else tuple(int(c) for c in candidates)
    if mean == "zero":
        var = float(np.mean(y ** 2)) if prior_variance is None else float(prior_variance)
        return MeanFit(candidates, (), np.zeros(0), var, float(y @ y), n)
    if mean != "stepwise":
        raise ValueError(f"unknown mean mode {mean!r}")
    if n < 3:
        raise FitError("need at least 3 runs to fit a mean function")
    max_terms = max(2, n // 10) if max_terms is None else int(max_terms)

    G = np.ones((n, 1))
    tss = float(np.sum((y - y.mean()) ** 2))
    rss = tss
    terms = [()]
    active = []
    if tss > 0:
        lin = np.column_stack([X[:, c] for c in candidates]) if candidates else np.zeros((n, 0))
        picks, G, rss = _forward(G, y, lin, len(candidates),
                                 min(max_actives, max_terms - 1), rss, tss, n, gamma)
        active = [candidates[p] for p in picks]
        terms += [(a,) for a in active]
        if second_order and active and rss > 1e-12 * tss and len(terms) < max_terms:
            quad = [(a, b) for i, a in enumerate(sorted(active)) for b in sorted(active)[i:]]
            Qc = basis_matrix(X, quad)
            picks, G, rss = _forward(G, y, Qc, len(quad), max_terms - len(terms),
                                     rss, tss, n, gamma)
            terms += [quad[p] for p in picks]
    keep = _drop_collinear(G, terms)
    G = G[:, keep]
    terms = [terms[c] for c in keep]
    coef, *_ = np.linalg.lstsq(G, y, rcond=None)
    resid = y - G @ coef
    rss = float(resid @ resid)
    dof = n - len(terms)
    var = rss / dof if dof > 0 else rss / n
    return MeanFit(tuple(active), tuple(terms), coef, float(var), rss, n)


# ------------------------------------------------------------------- covariance


def correlation(X1, X2, active, theta):
    """Gaussian correlation over the active coordinates."""
    if len(active) == 0:
        return np.ones((len(X1), len(X2)))
    A1 = _as_2d(X1)[:, active] / theta
    A2 = _as_2d(X2)[:, active] / theta
    d2 = (np.sum(A1 ** 2, 1)[:, None] + np.sum(A2 ** 2, 1)[None, :] - 2.0 * A1 @ A2.T)
    return np.exp(-np.maximum(d2, 0.0))


def _coincident(X1, X2):
    """Boolean matrix of exact row coincidence (for the nugget)."""
    index = {}
    for j, k in enumerate(_row_keys(X2)):
        index.setdefault(k, []).append(j)
    M = np.zeros((len(X1), len(X2)), dtype=bool)
    for i, k in enumerate(_row_keys(X1)):
        for j in index.get(k, ()):
            M[i, j] = True
    return M


def concentrated_loglik(X, r, active, theta, nugget_fraction=0.05):
    """Profile log-likelihood of residuals ``r`` with the variance scale maximised out."""
    n = len(r)
    R = (1.0 - nugget_fraction) * correlation(X, X, active, theta)
    R[np.diag_indices(n)] += nugget_fraction
    try:
        c = cho_factor(R, lower=True)
    except LinAlgError:
        return -np.inf
    s2 = float(r @ cho_solve(c, r)) / n
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    if s2 <= 0:
        return -np.inf
    return -0.5 * (n * np.log(s2) + logdet)


def group_actives(active, first_order_coef, n_groups=5):
    """Split actives into at most ``n_groups`` by decreasing |first-order coefficient|."""
    if not active:
        return []
    order = np.argsort(-np.abs(np.asarray(first_order_coef, dtype=float)), kind="stable")
    k = min(n_groups, len(active))
    return [sorted(active[i] for i in chunk) for chunk in np.array_split(order, k)]


def fit_correlation_lengths(X, residuals, active, *, mode="grouped", first_order_coef=None,
                            grid=THETA_GRID, n_groups=5, nugget_fraction=0.05,
                            fixed=2.0, max_sweeps=6):
    """Correlation lengths for ``active`` (returned in the same order).

    ``fixed`` mode returns a common value.  ``grouped`` maximises the profile
    likelihood over ``grid`` by coordinate ascent on groups of actives sharing
    one length.
    """
    active = list(active)
    if mode == "fixed" or not active:
        return np.full(len(active), float(fixed))
    if mode != "grouped":
        raise ValueError(f"unknown correlation mode {mode!r}")
    X = _as_2d(X)
    r = np.asarray(residuals, dtype=float)
    coef = np.ones(len(active)) if first_order_coef is None else first_order_coef
    groups = group_actives(active, coef, n_groups)
    pos = {a: i for i, a in enumerate(active)}
    grid = np.asarray(grid, dtype=float)

    def theta_of(idx):
        th = np.empty(len(active))
        for g, gi in zip(groups, idx):
            th[[pos[a] for a in g]] = grid[gi]
        return th

    cache = {}

    def ll(idx):
        key = tuple(idx)
        if key not in cache:
            cache[key] = concentrated_loglik(X, r, active, theta_of(idx), nugget_fraction)
        return cache[key]

    # common length first, then refine group by group
    idx = [max(range(len(grid)), key=lambda g: ll([g] * len(groups)))] * len(groups)
    for _ in range(max_sweeps):
        changed = False
        for gpos in range(len(groups)):
            best = max(range(len(grid)),
                       key=lambda g: ll(idx[:gpos] + [g] + idx[gpos + 1:]))
            if best != idx[gpos]:
                idx = idx[:gpos] + [best] + idx[gpos + 1:]
                changed = True
        if not changed:
            break
    if not np.isfinite(ll(idx)):
        raise FitError("correlation-length likelihood is not finite anywhere on the grid")
    if any(i in (0, len(grid) - 1) for i in idx):
        warnings.warn("correlation length chosen on the grid boundary", RuntimeWarning,
                      stacklevel=2)
    return theta_of(idx)


def fit_nugget_fraction(X, residuals, active, theta, grid=NUGGET_GRID):
    """Share of residual variance given to the nugget, by profile likelihood over ``grid``."""
    r = np.asarray(residuals, dtype=float)
    if not np.any(np.abs(r) > 1e-12 * max(1.0, np.abs(r).max(initial=0.0))):
        return float(grid[0])
    lls = [concentrated_loglik(X, r, list(active), theta, f) for f in grid]
    if not np.any(np.isfinite(lls)):
        raise FitError("nugget likelihood is not finite anywhere on the grid")
    return float(grid[int(np.argmax(lls))])


# ---------------------------------------------------------------------- emulator


@dataclass(frozen=True)
class EmulatorSpec:
    """Everything about an emulator except its training data."""

    active: tuple
    terms: tuple
    coef: np.ndarray
    sigma_u2: float
    theta: np.ndarray
    sigma_w2: float

    def __post_init__(self):
        if self.sigma_u2 < 0 or self.sigma_w2 < 0:
            raise FitError("negative variance component")
        if len(self.theta) != len(self.active):
            raise FitError("one correlation length per active input is required")
        if np.any(np.asarray(self.theta) <= 0):
            raise FitError("correlation lengths must be positive")

    def prior_mean(self, X):
        if not self.terms:
            return np.zeros(len(_as_2d(X)))
        return basis_matrix(X, self.terms) @ np.asarray(self.coef)

    def covariance(self, X1, X2):
        C = self.sigma_u2 * correlation(X1, X2, list(self.active), np.asarray(self.theta))
        if self.sigma_w2 > 0:
            C = C + self.sigma_w2 * _coincident(X1, X2)
        return C


class Emulator:
    """An emulator spec adjusted by a training set."""

    def __init__(self, spec: EmulatorSpec, train: TrainingSet, name=None, strategy=None):
        self.spec = spec
        self.train = train
        self.name = name
        self.strategy = strategy
        X, y = train.X, train.y
        self._resid = y - spec.prior_mean(X)
        self._weights = None
        self._chol = None
        if spec.sigma_u2 > 0:
            K = spec.covariance(X, X)
            try:
                self._chol = cho_factor(K, lower=True)
            except LinAlgError as err:
                raise FitError("Var[D] is not positive definite; add a nugget "
                               "or remove near-duplicate runs") from err
            self._weights = cho_solve(self._chol, self._resid)

    def predict(self, X, chunk=4096):
        """Adjusted expectation and variance at the rows of ``X``."""
        X = _as_2d(X)
        mean = np.empty(len(X))
        var = np.empty(len(X))
        for s in range(0, len(X), chunk):
            mean[s:s + chunk], var[s:s + chunk] = self._predict(X[s:s + chunk])
        return mean, var

    def _predict(self, X):
        spec = self.spec
        m = spec.prior_mean(X)
        prior_var = spec.sigma_u2 + spec.sigma_w2
        if self._chol is None:
            # no correlated residual: only exact training coincidences are informed
            v = np.full(len(X), prior_var)
            if spec.sigma_w2 > 0:
                hit = _coincident(X, self.train.X)
                rows = np.flatnonzero(hit.any(1))
                for i in rows:
                    js = np.flatnonzero(hit[i])
                    m[i] += self._resid[js].mean()
                    v[i] = 0.0
            return m, v
        k = spec.covariance(X, self.train.X)
        m = m + k @ self._weights
        v = prior_var - np.einsum("ij,ji->i", k, cho_solve(self._chol, k.T))
        return m, np.maximum(v, 0.0)

    # serialization -------------------------------------------------------------

    def to_dict(self):
        s = self.spec
        return {
            "format": "histmatch-emulator",
            "version": FORMAT_VERSION,
            "name": self.name,
            "strategy": self.strategy,
            "active": [int(a) for a in s.active],
            "terms": [list(map(int, t)) for t in s.terms],
            "coef": [float(c) for c in s.coef],
            "sigma_u2": float(s.sigma_u2),
            "sigma_w2": float(s.sigma_w2),
            "theta": [float(t) for t in s.theta],
            "training": {
                "sha256": self.train.digest(),
                "X": self.train.X.tolist(),
                "y": self.train.y.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != "histmatch-emulator":
            raise ValueError("not a serialized emulator")
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported emulator format version {doc.get('version')!r}")
        train = TrainingSet(np.array(doc["training"]["X"], dtype=float),
                            np.array(doc["training"]["y"], dtype=float))
        if train.digest() != doc["training"]["sha256"]:
            raise ValueError("training data digest mismatch")
        spec = EmulatorSpec(
            active=tuple(doc["active"]), terms=tuple(tuple(t) for t in doc["terms"]),
            coef=np.array(doc["coef"], dtype=float), sigma_u2=doc["sigma_u2"],
            theta=np.array(doc["theta"], dtype=float), sigma_w2=doc["sigma_w2"],
        )
        return cls(spec, train, name=doc.get("name"), strategy=doc.get("strategy"))

    def dumps(self):
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


def bl_update(spec, train, X):
    """Adjusted expectation and variance of f at ``X`` given the training runs."""
    return Emulator(spec, train).predict(X)


# ----------------------------------------------------------------------- fitting


@dataclass(frozen=True)
class EmulatorSettings:
    strategy: str = "linear"
    mean: str = "stepwise"
    max_actives: int = 12
    second_order: bool = True
    gamma: float = 1.0
    nugget_fraction: float | str = "auto"
    n_groups: int = 5
    theta: float | None = None
    sigma_u2: float | None = None
    sigma_w2: float | None = None
    max_terms: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.nugget_fraction != "auto" and not 0.0 <= float(self.nugget_fraction) < 1.0:
            raise ValueError("nugget_fraction must be 'auto' or lie in [0, 1)")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in (d or {}).items() if v is not None})


def fit_emulator(X, y, settings=EmulatorSettings(), candidates=None, name=None):
    """Fit one output's emulator from runs (X, y)."""
    train = TrainingSet(X, y)
    mf = fit_mean_and_actives(
        train.X, train.y, candidates, max_actives=settings.max_actives,
        second_order=settings.second_order,
        max_terms=settings.max_terms, gamma=settings.gamma, mean=settings.mean,
        prior_variance=settings.sigma_u2,
    )
    s2 = mf.residual_variance
    if settings.strategy == "linear":
        # regression only: residual variance is uncorrelated
        su2 = 0.0
        sw2 = s2 if settings.sigma_w2 is None else settings.sigma_w2
        theta = np.ones(len(mf.active))
    else:
        resid = train.y - mf.predict(train.X)
        auto = settings.nugget_fraction == "auto"
        f = NUGGET_GRID[0] if auto else float(settings.nugget_fraction)
        if settings.theta is not None or settings.strategy == "fixed":
            value = 2.0 if settings.theta is None else float(settings.theta)
            theta = np.full(len(mf.active), value)
            if auto and settings.sigma_w2 is None:
                f = fit_nugget_fraction(train.X, resid, mf.active, theta)
        else:
            lin = {t[0]: c for t, c in zip(mf.terms, mf.coef) if len(t) == 1}
            coef = [lin.get(a, 0.0) for a in mf.active]
            if auto:
                f = fit_nugget_fraction(train.X, resid, mf.active, np.full(len(mf.active), 2.0))
            theta = fit_correlation_lengths(
                train.X, resid, mf.active, mode="grouped", first_order_coef=coef,
                n_groups=settings.n_groups, nugget_fraction=f,
            )
            if auto:
                f = fit_nugget_fraction(train.X, resid, mf.active, theta)
        sw2 = f * s2 if settings.sigma_w2 is None else settings.sigma_w2
        su2 = (1.0 - f) * s2 if settings.sigma_u2 is None else settings.sigma_u2
    spec = EmulatorSpec(mf.active, mf.terms, mf.coef, float(su2), theta, float(sw2))
    return Emulator(spec, train, name=name, strategy=settings.strategy)


# ------------------------------------------------------------------- diagnostics


@dataclass
class DiagnosticReport:
    name: str | None
    n: int
    U: np.ndarray = field(repr=False)
    frac_large: float
    inconsistent: np.ndarray = field(repr=False)
    frac_inconsistent: float
    passed: bool

    def to_dict(self):
        return {"name": self.name, "n": self.n, "frac_abs_u_gt_3": self.frac_large,
                "frac_inconsistent": self.frac_inconsistent, "passed": self.passed}


def standardized_errors(mean, var, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        sd = np.sqrt(var)
        U = (y - mean) / sd
    return np.where(sd > 0, U, np.where(y == mean, 0.0, np.inf))


def diagnose(emulator, X, y, *, target=None, cutoff=3.0, u_bound=3.0,
             max_frac_large=0.1, max_frac_inconsistent=0.05):
    """Validate an emulator on held-out runs.

    Fails if more than ``max_frac_large`` of |U| exceed ``u_bound``, or if a
    ``target`` (an object with ``implausibility(mean, var)``) is given and the
    emulator would rule out more than ``max_frac_inconsistent`` of runs whose
    true output is non-implausible.
    """
    mean, var = emulator.predict(X)
    y = np.asarray(y, dtype=float)
    U = standardized_errors(mean, var, y)
    frac = float(np.mean(np.abs(U) > u_bound)) if len(U) else 0.0
    incons = np.zeros(len(y), dtype=bool)
    fi = 0.0
    if target is not None:
        plausible = target.implausibility(y, 0.0) <= cutoff
        incons = plausible & (target.implausibility(mean, var) > cutoff)
        # rate among runs that should have been kept
        fi = float(incons.sum() / plausible.sum()) if plausible.any() else 0.0
    return DiagnosticReport(getattr(emulator, "name", None), len(y), U, frac, incons, fi,
                            frac <= max_frac_large and fi <= max_frac_inconsistent)
