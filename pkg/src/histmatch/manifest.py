"""Campaign manifests: simulator choice, targets, wave schedule, seeds."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .crosstalk import outputs as xo
from .crosstalk.model import LAMBDA_DEFAULT, load_parameter_table
from .matching import ObservationTarget, WaveConfig, validate_schedule
from .simulators import CrosstalkSimulator, ExternalCommandSimulator, Toy1DSimulator

MANIFEST_VERSION = 1
SIMULATORS = ("crosstalk", "toy1d", "external-command")


class ManifestError(ValueError):
    pass


@dataclass
class CampaignManifest:
    simulator: object
    targets: list
    schedule: list
    seed: int = 0
    workers: int = 1
    out: str | None = None
    stop_ratio: float = 0.1
    source: str | None = None
    raw: dict = field(default_factory=dict)


def _resolve(base, path):
    return path if os.path.isabs(path) else os.path.join(base, path)


def _build_simulator(spec, base):
    sid = spec.get("id")
    if sid not in SIMULATORS:
        raise ManifestError(f"unknown simulator {sid!r}; expected one of {SIMULATORS}")
    if sid == "toy1d":
        return Toy1DSimulator()
    if sid == "crosstalk":
        params = spec.get("parameters")
        table = spec.get("outputs")
        return CrosstalkSimulator(
            table=xo.load_output_table(_resolve(base, table)) if table else None,
            parameters=load_parameter_table(_resolve(base, params)) if params else None,
            lam=float(spec.get("lambda", LAMBDA_DEFAULT)),
        )
    for key in ("command", "inputs", "outputs", "lower", "upper"):
        if key not in spec:
            raise ManifestError(f"external-command simulator needs {key!r}")
    if not len(spec["inputs"]) == len(spec["lower"]) == len(spec["upper"]):
        raise ManifestError("inputs, lower and upper must have equal length")
    return ExternalCommandSimulator(spec["command"], spec["inputs"], spec["outputs"],
                                    spec["lower"], spec["upper"], spec.get("timeout"))


def _build_targets(spec, simulator, base):
    if spec is None or spec == "default":
        if isinstance(simulator, CrosstalkSimulator):
            return [ObservationTarget.from_window(o.name, o.log_min, o.log_max, o.dataset)
                    for o in simulator.table]
        raise ManifestError("targets must be given for this simulator")
    if isinstance(spec, str):
        with open(_resolve(base, spec)) as fh:
            spec = json.load(fh)
        spec = spec.get("targets", spec) if isinstance(spec, dict) else spec
    targets = []
    for d in spec:
        try:
            targets.append(ObservationTarget.from_dict(d))
        except (KeyError, TypeError, ValueError) as err:
            raise ManifestError(f"bad target {d!r}: {err}") from err
    names = set(simulator.output_names)
    for t in targets:
        if t.name not in names:
            raise ManifestError(f"target {t.name!r} is not a simulator output")
        if t.obs_variance <= 0:
            raise ManifestError(f"target {t.name!r} has zero observation variance")
        if t.window is not None:
            lo, hi = t.window
            if abs(t.z - 0.5 * (lo + hi)) > 1e-3 or abs(6 * np.sqrt(t.obs_variance) - (hi - lo)) > 1e-3:
                raise ManifestError(f"target {t.name!r}: z and sigma disagree with its window")
    return targets


def parse_manifest(doc, base=".", source=None):
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    if doc.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
    try:
        simulator = _build_simulator(doc.get("simulator", {}), base)
        targets = _build_targets(doc.get("targets"), simulator, base)
        schedule = [WaveConfig.from_dict(w) for w in doc.get("schedule", [])]
    except ManifestError:
        raise
    except (OSError, KeyError, TypeError, ValueError) as err:
        raise ManifestError(str(err)) from err
    if not schedule:
        raise ManifestError("schedule is empty")
    if len({w.index for w in schedule}) != len(schedule):
        raise ManifestError("wave indices must be unique")
    try:
        validate_schedule(schedule)
    except ValueError as err:
        raise ManifestError(str(err)) from err
    datasets = {t.dataset for t in targets}
    for w in schedule:
        if not set(w.datasets) & datasets:
            raise ManifestError(f"wave {w.index}: no targets in datasets {w.datasets}")
    return CampaignManifest(simulator, targets, schedule, int(doc.get("seed", 0)),
                            int(doc.get("workers", 1)), doc.get("out"),
                            float(doc.get("stop_ratio", 0.1)), source, doc)


def load_manifest(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ManifestError(f"cannot read manifest {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ManifestError(f"{path}:{err.lineno}: {err.msg}") from err
    return parse_manifest(doc, os.path.dirname(os.path.abspath(path)), path)
