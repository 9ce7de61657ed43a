"""The 32 equilibrium outputs compared against experimental trends."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .model import (
    DEFAULT_SOLVER, LAMBDA_DEFAULT, SPECIES_INDEX, DomainError, ExperimentSpec,
    NonConverged, check_point, solve_steady_state,
)

CHEMICALS = ("Auxin", "PLSm", "CK", "ET", "PIN")
DATASETS = ("A", "B", "C")


@dataclass(frozen=True)
class OutputDef:
    name: str
    dataset: str
    log_min: float
    log_max: float
    trend: bool
    chemical: str
    config: ExperimentSpec
    reference: ExperimentSpec | None  # None: absolute (non-ratio) output

    @property
    def is_ratio(self):
        return self.reference is not None


def _spec(d):
    if d is None:
        return None
    return ExperimentSpec(d["mutant"], frozenset(d.get("feeding", ())))


def parse_output_table(doc) -> tuple[OutputDef, ...]:
    rows = []
    seen = set()
    for r in doc["outputs"]:
        if r["name"] in seen:
            raise DomainError(f"duplicate output {r['name']!r}")
        seen.add(r["name"])
        if r["chemical"] not in CHEMICALS:
            raise DomainError(f"{r['name']}: unknown chemical {r['chemical']!r}")
        if r["dataset"] not in DATASETS:
            raise DomainError(f"{r['name']}: unknown dataset {r['dataset']!r}")
        if not r["log_min"] < r["log_max"]:
            raise DomainError(f"{r['name']}: empty window")
        rows.append(OutputDef(
            name=r["name"], dataset=r["dataset"], log_min=float(r["log_min"]),
            log_max=float(r["log_max"]), trend=bool(r.get("trend", False)),
            chemical=r["chemical"], config=_spec(r["config"]), reference=_spec(r.get("reference")),
        ))
    return tuple(rows)


def load_output_table(path=None) -> tuple[OutputDef, ...]:
    if path is None:
        text = resources.files("histmatch.crosstalk").joinpath("data/outputs.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return parse_output_table(json.loads(text))


@lru_cache(maxsize=1)
def default_output_table() -> tuple[OutputDef, ...]:
    return load_output_table()


def output_names(table=None):
    return tuple(o.name for o in (table or default_output_table()))


def required_experiments(table=None):
    """Distinct experiment configurations needed by the table, wild type first."""
    table = table or default_output_table()
    configs = []
    for o in table:
        for c in (o.reference, o.config):
            if c is not None and c not in configs:
                configs.append(c)
    configs.sort(key=lambda c: (c != ExperimentSpec(), c.mutant != "wt", c.label))
    return configs


def pin_average(pin1pm, pin1pi, lam=LAMBDA_DEFAULT):
    """Volume-weighted PIN over cytosol and cell wall."""
    return (pin1pm + lam * pin1pi) / (1.0 + lam)


def chemical_level(state, chemical, lam=LAMBDA_DEFAULT):
    if chemical == "PIN":
        return pin_average(state[SPECIES_INDEX["PIN1pm"]], state[SPECIES_INDEX["PIN1pi"]], lam)
    return state[SPECIES_INDEX[chemical]]


@dataclass
class OutputVector:
    values: np.ndarray
    converged: bool
    failed: str | None = None  # label of the first non-converged experiment


def outputs_from_states(states, table=None, lam=LAMBDA_DEFAULT):
    """Assemble log outputs from per-experiment steady states (dict label -> state)."""
    table = table or default_output_table()
    out = np.empty(len(table))
    with np.errstate(divide="ignore", invalid="ignore"):
        for i, o in enumerate(table):
            num = chemical_level(states[o.config.label], o.chemical, lam)
            if o.reference is None:
                out[i] = np.log(num)
            else:
                out[i] = np.log(num / chemical_level(states[o.reference.label], o.chemical, lam))
    return out


def compute_outputs(coords, table=None, config=DEFAULT_SOLVER, lam=LAMBDA_DEFAULT, strict=True):
    """Equilibrium outputs for one scaled input point.

    With ``strict`` a NonConverged error propagates, naming the failing
    experiment; otherwise an all-NaN vector flagged non-converged is returned.
    """
    coords = check_point(coords)
    table = table or default_output_table()
    states = {}
    try:
        for spec in required_experiments(table):
            states[spec.label] = solve_steady_state(coords, spec, config=config, lam=lam)
    except NonConverged as err:
        if strict:
            raise
        label = err.experiment.label if err.experiment is not None else "?"
        return OutputVector(np.full(len(table), np.nan), False, label)
    values = outputs_from_states(states, table, lam)
    if not np.all(np.isfinite(values)):
        bad = [o.name for o, v in zip(table, values) if not np.isfinite(v)]
        if strict:
            raise NonConverged(f"non-finite outputs {bad}")
        return OutputVector(np.full(len(table), np.nan), False, bad[0])
    return OutputVector(values, True)


def compute_outputs_batch(points, table=None, config=DEFAULT_SOLVER, lam=LAMBDA_DEFAULT):
    """Outputs for each row of ``points``; returns (values n x q, converged mask)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    table = table or default_output_table()
    values = np.full((len(points), len(table)), np.nan)
    ok = np.zeros(len(points), dtype=bool)
    for i, x in enumerate(points):
        r = compute_outputs(x, table, config, lam, strict=False)
        values[i], ok[i] = r.values, r.converged
    return values, ok
