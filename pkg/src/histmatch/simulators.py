"""Simulators usable by the matching engine.

A simulator exposes ``input_names``, ``output_names``, box bounds ``lower`` and
``upper``, and ``evaluate(X, workers=1) -> (Y, converged)``.
"""

from __future__ import annotations

import shlex
import subprocess
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .crosstalk import outputs as xo
from .crosstalk.model import DEFAULT_SOLVER, LAMBDA_DEFAULT, N_INPUTS, default_parameter_table
from .errors import DomainError
from .toy import LOWER as TOY_LOWER, UPPER as TOY_UPPER, toy_1d


def _chunks(n, k):
    bounds = np.linspace(0, n, k + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _crosstalk_batch(args):
    X, table, config, lam = args
    return xo.compute_outputs_batch(X, table, config, lam)


class CrosstalkSimulator:
    """Equilibrium outputs of the hormonal crosstalk model on scaled inputs."""

    def __init__(self, table=None, config=DEFAULT_SOLVER, lam=LAMBDA_DEFAULT, parameters=None):
        self.table = tuple(table or xo.default_output_table())
        self.config = config
        self.lam = lam
        self.parameters = parameters or default_parameter_table()
        self.input_names = tuple(self.parameters.names)
        self.output_names = xo.output_names(self.table)
        self.lower = np.full(N_INPUTS, -1.0)
        self.upper = np.full(N_INPUTS, 1.0)

    def evaluate(self, X, workers=1):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if len(X) == 0:
            return np.empty((0, len(self.table))), np.empty(0, dtype=bool)
        if workers <= 1 or len(X) < 2 * workers:
            return xo.compute_outputs_batch(X, self.table, self.config, self.lam)
        parts = _chunks(len(X), 4 * workers)
        with ProcessPoolExecutor(workers) as ex:
            res = list(ex.map(_crosstalk_batch,
                              [(X[a:b], self.table, self.config, self.lam) for a, b in parts]))
        return np.vstack([r[0] for r in res]), np.concatenate([r[1] for r in res])


class Toy1DSimulator:
    """f(x) = 0.1 x + cos(x)."""

    input_names = ("x",)
    output_names = ("f",)
    lower = np.array([TOY_LOWER])
    upper = np.array([TOY_UPPER])

    def evaluate(self, X, workers=1):
        X = np.atleast_2d(np.asarray(X, dtype=float)).reshape(-1, 1)
        return toy_1d(X[:, 0])[:, None], np.ones(len(X), dtype=bool)


class ExternalCommandSimulator:
    """Runs a command once per batch: one whitespace-separated point per stdin
    line, one line of outputs per point on stdout (``nan`` marks failure)."""

    def __init__(self, command, input_names, output_names, lower, upper, timeout=None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.input_names = tuple(input_names)
        self.output_names = tuple(output_names)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.timeout = timeout

    def evaluate(self, X, workers=1):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if len(X) == 0:
            return np.empty((0, len(self.output_names))), np.empty(0, dtype=bool)
        if np.any((X < self.lower) | (X > self.upper)):
            raise DomainError("point outside the simulator box")
        stdin = "".join(" ".join(repr(float(v)) for v in x) + "\n" for x in X)
        proc = subprocess.run(self.command, input=stdin, capture_output=True, text=True,
                              timeout=self.timeout, check=False)
        if proc.returncode != 0:
            raise RuntimeError(f"simulator command failed ({proc.returncode}): {proc.stderr.strip()}")
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if len(lines) != len(X):
            raise RuntimeError(f"simulator returned {len(lines)} lines for {len(X)} points")
        Y = np.array([[float(v) for v in ln.split()] for ln in lines])
        if Y.shape[1] != len(self.output_names):
            raise RuntimeError(f"simulator returned {Y.shape[1]} outputs, expected {len(self.output_names)}")
        ok = np.all(np.isfinite(Y), axis=1)
        Y[~ok] = np.nan
        return Y, ok


def crosstalk_targets(table=None):
    """Observation targets from the output table windows."""
    from .matching import ObservationTarget
    return [ObservationTarget.from_window(o.name, o.log_min, o.log_max, o.dataset)
            for o in (table or xo.default_output_table())]
