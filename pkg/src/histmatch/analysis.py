"""Post-match analytics on archived simulator runs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .matching import ARCHIVE_CUTOFF, implausibility


@dataclass(frozen=True)
class SampleSet:
    label: str
    X: np.ndarray
    input_names: tuple
    Y: np.ndarray | None = None
    output_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "X", np.atleast_2d(np.asarray(self.X, dtype=float)))
        if self.Y is not None:
            object.__setattr__(self, "Y", np.atleast_2d(np.asarray(self.Y, dtype=float)))
            if len(self.Y) != len(self.X):
                raise ValueError("inputs and outputs differ in length")

    def __len__(self):
        return len(self.X)

    def subset(self, mask, label):
        return SampleSet(label, self.X[mask], self.input_names,
                         None if self.Y is None else self.Y[mask], self.output_names)

    def output(self, name):
        if self.Y is None or name not in self.output_names:
            raise KeyError(f"output {name!r} not in sample {self.label!r}")
        return self.Y[:, list(self.output_names).index(name)]


def _cov(X):
    return np.atleast_2d(np.cov(X, rowvar=False, ddof=1))


def variance_resolution(u, v, inputs=None):
    """1 - det(Var_v) / det(Var_u) over the selected input coordinates."""
    U = u.X if isinstance(u, SampleSet) else np.atleast_2d(u)
    V = v.X if isinstance(v, SampleSet) else np.atleast_2d(v)
    idx = list(range(U.shape[1])) if inputs is None else list(np.atleast_1d(inputs))
    if len(U) < 2 or len(V) < 2:
        raise ValueError("variance resolution needs at least 2 points in each sample")
    Cu, Cv = _cov(U[:, idx]), _cov(V[:, idx])
    w, vecs = np.linalg.eigh(Cu)
    tol = 1e-12 * max(w.max(), 1e-300)
    if w.min() <= tol:
        names = getattr(u, "input_names", None)
        bad = []
        for k in np.flatnonzero(w <= tol):
            j = idx[int(np.argmax(np.abs(vecs[:, k])))]
            bad.append(names[j] if names else f"x{j}")
        raise np.linalg.LinAlgError(f"reference sample covariance is singular along {bad}")
    _, logdet_u = np.linalg.slogdet(Cu)
    sign_v, logdet_v = np.linalg.slogdet(Cv)
    if sign_v <= 0:
        return 1.0
    return float(1.0 - np.exp(logdet_v - logdet_u))


def variance_resolution_pairs(u, v):
    """Matrix of pairwise resolutions; the diagonal holds single-input resolutions."""
    d = u.X.shape[1]
    R = np.empty((d, d))
    for i in range(d):
        R[i, i] = variance_resolution(u, v, [i])
        for j in range(i + 1, d):
            R[i, j] = R[j, i] = variance_resolution(u, v, [i, j])
    return R


def joint_constraint_matrix(s):
    """Squared sample correlations between inputs; diagonal 0, NaN for constant inputs."""
    X = s.X if isinstance(s, SampleSet) else np.atleast_2d(s)
    if len(X) < 3:
        raise ValueError("joint constraint needs at least 3 points")
    C = _cov(X)
    sd = np.sqrt(np.diag(C))
    with np.errstate(invalid="ignore", divide="ignore"):
        R2 = (C / np.outer(sd, sd)) ** 2
    R2[(sd == 0)[:, None] | (sd == 0)[None, :]] = np.nan
    R2 = np.clip(R2, 0.0, 1.0)
    np.fill_diagonal(R2, 0.0)
    return R2


@dataclass
class Informativeness:
    matrix: np.ndarray  # inputs x outputs
    n_pass: np.ndarray
    low_confidence: np.ndarray


def input_output_informativeness(wave1, targets, cutoff=ARCHIVE_CUTOFF, min_pass=10):
    """1 - Var(input | runs passing an output's target) / Var(input | all runs)."""
    base = np.var(wave1.X, axis=0, ddof=1)
    M = np.full((wave1.X.shape[1], len(targets)), np.nan)
    n_pass = np.zeros(len(targets), dtype=int)
    for j, t in enumerate(targets):
        y = wave1.output(t.name)
        ok = np.isfinite(y)
        passed = np.zeros(len(y), dtype=bool)
        passed[ok] = implausibility(y[ok], 0.0, t) <= cutoff
        n_pass[j] = passed.sum()
        if n_pass[j] >= 2:
            with np.errstate(invalid="ignore", divide="ignore"):
                M[:, j] = 1.0 - np.var(wave1.X[passed], axis=0, ddof=1) / base
    return Informativeness(M, n_pass, n_pass < min_pass)


def pair_density(X, i, j, bins=20, lower=None, upper=None):
    """2-d histogram counts of inputs i and j, with bin edges."""
    lo = X.min(0) if lower is None else np.broadcast_to(lower, X.shape[1])
    hi = X.max(0) if upper is None else np.broadcast_to(upper, X.shape[1])
    H, ex, ey = np.histogram2d(X[:, i], X[:, j], bins=bins,
                               range=[[lo[i], hi[i]], [lo[j], hi[j]]])
    return H, ex, ey


def hdr_levels(counts, masses=(0.5, 0.9)):
    """Count thresholds whose super-level bin sets hold at least each mass."""
    c = np.sort(np.ravel(counts))[::-1]
    total = c.sum()
    if total == 0:
        return {m: np.nan for m in masses}
    cum = np.cumsum(c) / total
    return {m: float(c[min(np.searchsorted(cum, m), len(c) - 1)]) for m in masses}


@dataclass
class SignSplit:
    output: str
    positive: SampleSet
    negative: SampleSet
    summary: dict


def _quantiles(Y, names):
    qs = (0.0, 0.25, 0.5, 0.75, 1.0)
    if len(Y) == 0:
        return {n: None for n in names}
    Q = np.nanquantile(Y, qs, axis=0)
    return {n: dict(zip(("min", "q25", "median", "q75", "max"), map(float, Q[:, k])))
            for k, n in enumerate(names)}


def sign_split(s, output):
    """Split runs by the sign of ``output`` and summarise each side."""
    y = s.output(output)
    pos = y > 0
    positive = s.subset(pos, f"{s.label}:{output}>0")
    negative = s.subset(~pos, f"{s.label}:{output}<=0")
    if len(positive) == 0 or len(negative) == 0:
        warnings.warn(f"sign split of {output!r} has an empty side", RuntimeWarning, stacklevel=2)
    summary = {
        "n_positive": len(positive), "n_negative": len(negative),
        "fraction_negative": float(np.mean(~pos)) if len(y) else float("nan"),
        "positive": _quantiles(positive.Y, s.output_names),
        "negative": _quantiles(negative.Y, s.output_names),
    }
    return SignSplit(output, positive, negative, summary)


def pass_proportions(archive, targets, cutoff=ARCHIVE_CUTOFF):
    """Per wave and target: fraction of converged runs with true-run implausibility within cutoff."""
    waves = np.unique(archive.wave)
    if len(waves) == 0:
        raise ValueError("empty archive")
    I = archive.true_implausibility(targets)
    P = np.full((len(waves), len(targets)), np.nan)
    for a, w in enumerate(waves):
        m = (archive.wave == w) & archive.ok
        if m.any():
            P[a] = np.mean(I[m] <= cutoff, axis=0)
    return waves, P


ANALYSES = ("variance-resolution", "joint-constraint", "informativeness", "pass-proportions",
            "sign-split", "pairs-density")
