"""Implausibility, wave orchestration and volume accounting."""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io
from .design import Region, grid_design, pool_design, region_design, sample_region
from .emulation import Emulator, EmulatorSettings, diagnose, fit_emulator
from .errors import AcceptanceTooLow, DiagnosticsFailure, EmptyRegion, FitError, SamplerStuck

log = logging.getLogger(__name__)

MEASURES = ("I_M", "I_2M", "I_3M")
ARCHIVE_CUTOFF = 3.0


# ----------------------------------------------------------------------- targets


@dataclass(frozen=True)
class ObservationTarget:
    name: str
    z: float
    sigma_md: float
    sigma_me: float
    dataset: str = "A"
    window: tuple | None = None

    def __post_init__(self):
        if self.sigma_md < 0 or self.sigma_me < 0:
            raise ValueError(f"{self.name}: negative standard deviation")

    @classmethod
    def from_window(cls, name, lo, hi, dataset="A"):
        """Target whose z +/- 3 sigma is the window, sigma split equally between
        model discrepancy and measurement error."""
        if not hi > lo:
            raise ValueError(f"{name}: empty window ({lo}, {hi})")
        sigma = (hi - lo) / 6.0
        s = sigma / np.sqrt(2.0)
        return cls(name, 0.5 * (lo + hi), s, s, dataset, (float(lo), float(hi)))

    @property
    def obs_variance(self):
        return self.sigma_md ** 2 + self.sigma_me ** 2

    def implausibility(self, mean, variance=0.0):
        return implausibility(mean, variance, self)

    def to_dict(self):
        d = asdict(self)
        d["window"] = list(self.window) if self.window else None
        return d

    @classmethod
    def from_dict(cls, d):
        if "window" in d and d.get("window") and "z" not in d:
            return cls.from_window(d["name"], *d["window"], d.get("dataset", "A"))
        w = d.get("window")
        return cls(d["name"], float(d["z"]), float(d["sigma_md"]), float(d["sigma_me"]),
                   d.get("dataset", "A"), tuple(w) if w else None)


def implausibility(mean, variance, target):
    """|E - z| / sqrt(Var + sigma_md^2 + sigma_me^2)."""
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        raise ValueError("negative emulator variance")
    total = variance + target.obs_variance
    if np.any(total <= 0):
        raise ValueError(f"{target.name}: implausibility undefined with zero total variance")
    out = np.abs(mean - target.z) / np.sqrt(total)
    return float(out) if out.ndim == 0 else out


def combined_implausibility(values):
    """First, second and third largest values; None where there are too few."""
    v = np.sort(np.asarray(values, dtype=float).ravel())[::-1]
    if len(v) == 0:
        raise ValueError("no implausibilities to combine")
    return tuple(float(v[k]) if k < len(v) else None for k in range(3))


def combined_matrix(I):
    """Row-wise I_M, I_2M, I_3M for an (n x q) matrix; NaN where absent."""
    I = np.atleast_2d(I)
    s = -np.sort(-I, axis=1)
    out = np.full((len(I), 3), np.nan)
    k = min(3, I.shape[1])
    out[:, :k] = s[:, :k]
    return out


def passes_cutoffs(I, cutoffs):
    """Boolean per row: every active cutoff satisfied (absent measures impose nothing)."""
    C = combined_matrix(I)
    ok = np.ones(len(C), dtype=bool)
    for j, m in enumerate(MEASURES):
        c = cutoffs.get(m)
        if c is not None:
            ok &= ~(C[:, j] > c)
    return ok


# ---------------------------------------------------------------------- wave cut


class WaveCut:
    """Emulator implausibility test from one wave."""

    def __init__(self, emulators, targets, cutoffs, wave=None):
        if len(emulators) != len(targets):
            raise ValueError("one target per emulator")
        self.emulators = list(emulators)
        self.targets = list(targets)
        self.cutoffs = {m: cutoffs.get(m) for m in MEASURES}
        self.wave = wave

    def implausibilities(self, X):
        X = np.atleast_2d(X)
        I = np.empty((len(X), len(self.emulators)))
        for j, (em, t) in enumerate(zip(self.emulators, self.targets)):
            m, v = em.predict(X)
            I[:, j] = implausibility(m, v, t)
        return I

    def accepts(self, X):
        X = np.atleast_2d(X)
        if not self.emulators:
            return np.ones(len(X), dtype=bool)
        return passes_cutoffs(self.implausibilities(X), self.cutoffs)

    def variance_ratio(self, X):
        """Emulator variance over observation variance, per point and output."""
        X = np.atleast_2d(X)
        R = np.empty((len(X), len(self.emulators)))
        for j, (em, t) in enumerate(zip(self.emulators, self.targets)):
            R[:, j] = em.predict(X)[1] / t.obs_variance
        return R

    def to_dict(self):
        return {"wave": self.wave, "cutoffs": self.cutoffs,
                "outputs": [{"target": t.to_dict(), "emulator": e.to_dict()}
                            for e, t in zip(self.emulators, self.targets)]}

    @classmethod
    def from_dict(cls, d):
        ems = [Emulator.from_dict(o["emulator"]) for o in d["outputs"]]
        ts = [ObservationTarget.from_dict(o["target"]) for o in d["outputs"]]
        return cls(ems, ts, d["cutoffs"], d.get("wave"))


def region_to_dict(region):
    return {"lower": region.lower.tolist(), "upper": region.upper.tolist(),
            "cuts": [c.to_dict() for c in region.cuts]}


def region_from_dict(d):
    return Region(np.array(d["lower"]), np.array(d["upper"]),
                  [WaveCut.from_dict(c) for c in d["cuts"]])


# -------------------------------------------------------------------- wave setup


@dataclass
class WaveConfig:
    index: int
    datasets: tuple = ("A",)
    n_runs: int = 500
    strategy: str = "linear"
    cutoffs: dict = field(default_factory=lambda: {"I_M": 3.0})
    n_diagnostic: int = 200
    n_volume: int = 10000
    design: str = "maximin"
    training_scope: str = "new"
    emulator: dict = field(default_factory=dict)
    outputs: tuple | None = None

    def __post_init__(self):
        self.datasets = tuple(self.datasets)
        self.cutoffs = {m: (None if self.cutoffs.get(m) is None else float(self.cutoffs[m]))
                        for m in MEASURES}
        active = [c for c in self.cutoffs.values() if c is not None]
        if not active:
            raise ValueError(f"wave {self.index}: at least one cutoff must be active")
        if any(c <= 0 for c in active):
            raise ValueError(f"wave {self.index}: cutoffs must be positive")
        if self.design not in ("maximin", "grid", "pool"):
            raise ValueError(f"wave {self.index}: unknown design {self.design!r}")
        if self.training_scope not in ("new", "region", "all"):
            raise ValueError(f"wave {self.index}: unknown training scope {self.training_scope!r}")
        if self.n_runs < 2:
            raise ValueError(f"wave {self.index}: need at least 2 runs")
        self.settings = EmulatorSettings.from_dict({"strategy": self.strategy, **self.emulator})

    @classmethod
    def from_dict(cls, d):
        keys = {"index", "datasets", "n_runs", "strategy", "cutoffs", "n_diagnostic",
                "n_volume", "design", "training_scope", "emulator", "outputs"}
        unknown = set(d) - keys
        if unknown:
            raise ValueError(f"unknown wave keys {sorted(unknown)}")
        d = dict(d)
        if d.get("outputs") is not None:
            d["outputs"] = tuple(d["outputs"])
        return cls(**d)

    def to_dict(self):
        return {"index": self.index, "datasets": list(self.datasets), "n_runs": self.n_runs,
                "strategy": self.strategy, "cutoffs": self.cutoffs,
                "n_diagnostic": self.n_diagnostic, "n_volume": self.n_volume,
                "design": self.design, "training_scope": self.training_scope,
                "emulator": self.emulator,
                "outputs": list(self.outputs) if self.outputs is not None else None}


def validate_schedule(schedule):
    """Datasets must be introduced monotonically: each wave's set contains the previous."""
    prev = set()
    for w in schedule:
        cur = set(w.datasets)
        if not prev <= cur:
            raise ValueError(f"wave {w.index} drops datasets {sorted(prev - cur)}")
        prev = cur


# ------------------------------------------------------------------ run archive


@dataclass
class RunArchive:
    """Every simulator run made during a campaign."""

    input_names: tuple
    output_names: tuple
    X: np.ndarray = None
    Y: np.ndarray = None
    ok: np.ndarray = None
    wave: np.ndarray = None
    role: np.ndarray = None

    def __post_init__(self):
        d, q = len(self.input_names), len(self.output_names)
        if self.X is None:
            self.X = np.empty((0, d))
            self.Y = np.empty((0, q))
            self.ok = np.empty(0, dtype=bool)
            self.wave = np.empty(0, dtype=int)
            self.role = np.empty(0, dtype=object)

    def add(self, X, Y, ok, wave, role):
        self.X = np.vstack([self.X, X])
        self.Y = np.vstack([self.Y, Y])
        self.ok = np.concatenate([self.ok, ok])
        self.wave = np.concatenate([self.wave, np.full(len(X), wave, dtype=int)])
        self.role = np.concatenate([self.role, np.full(len(X), role, dtype=object)])

    def select(self, mask):
        return RunArchive(self.input_names, self.output_names, self.X[mask], self.Y[mask],
                          self.ok[mask], self.wave[mask], self.role[mask])

    def true_implausibility(self, targets):
        col = {n: i for i, n in enumerate(self.output_names)}
        I = np.full((len(self.X), len(targets)), np.inf)
        for j, t in enumerate(targets):
            y = self.Y[:, col[t.name]]
            good = self.ok & np.isfinite(y)
            I[good, j] = implausibility(y[good], 0.0, t)
        return I

    def acceptable(self, targets, cutoff=ARCHIVE_CUTOFF):
        """Converged runs with true-run implausibility within ``cutoff`` on every target."""
        if not targets:
            return self.ok.copy()
        return self.ok & np.all(self.true_implausibility(targets) <= cutoff, axis=1)

    def to_csv(self, path, extra=None):
        header = ["wave", "role", "converged", *self.input_names, *self.output_names]
        extra = extra or {}
        header += list(extra)
        rows = ([int(self.wave[i]), self.role[i], int(self.ok[i]), *self.X[i], *self.Y[i],
                 *(int(v[i]) if v.dtype == bool else v[i] for v in extra.values())]
                for i in range(len(self.X)))
        io.write_csv(path, header, rows)

    @classmethod
    def from_csv(cls, path, input_names, output_names):
        import csv
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d, q = len(input_names), len(output_names)
        if header[3:3 + d] != list(input_names) or header[3 + d:3 + d + q] != list(output_names):
            raise ValueError(f"{path}: column layout does not match the simulator")
        a = cls(tuple(input_names), tuple(output_names))
        if body:
            a.wave = np.array([int(r[0]) for r in body])
            a.role = np.array([r[1] for r in body], dtype=object)
            a.ok = np.array([r[2] == "1" for r in body])
            a.X = np.array([[float(v) for v in r[3:3 + d]] for r in body]).reshape(len(body), d)
            a.Y = np.array([[float(v) for v in r[3 + d:3 + d + q]] for r in body]).reshape(len(body), q)
        return a


# ----------------------------------------------------------------------- ledger


@dataclass
class LedgerRow:
    wave: int
    datasets: str
    n_runs: int
    n_converged: int
    emulated: int
    deferred: int
    fraction: float
    cumulative: float
    acceptable_runs: int
    verified_fraction: float
    stop: bool
    sampler: str


class VolumeLedger:
    FIELDS = tuple(LedgerRow.__dataclass_fields__)

    def __init__(self, rows=()):
        self.rows = list(rows)

    def append(self, row: LedgerRow):
        prev = self.rows[-1].cumulative if self.rows else 1.0
        expect = prev * row.fraction
        if not np.isclose(row.cumulative, expect, rtol=1e-12, atol=0):
            raise ValueError("cumulative fraction must equal the product of wave fractions")
        self.rows.append(row)

    @property
    def cumulative(self):
        return [r.cumulative for r in self.rows]

    def to_csv(self, path):
        io.write_csv(path, self.FIELDS, ([getattr(r, f) for f in self.FIELDS] for r in self.rows))

    @classmethod
    def from_csv(cls, path):
        import csv
        types = {f.name: f.type for f in LedgerRow.__dataclass_fields__.values()}
        conv = {"int": int, "float": float, "str": str, "bool": lambda s: s in ("1", "True")}
        with open(path, newline="") as fh:
            rows = [LedgerRow(**{k: conv[types[k]](v) for k, v in r.items()})
                    for r in csv.DictReader(fh)]
        return cls(rows)


# ------------------------------------------------------------------------ waves


@dataclass
class WaveResult:
    config: WaveConfig
    region: Region
    cut: WaveCut
    ledger: LedgerRow
    diagnostics: list
    deferred: list
    design: np.ndarray
    stop: bool
    safety: dict


def _targets_in_play(config, targets):
    ts = [t for t in targets if t.dataset in config.datasets]
    if config.outputs is not None:
        ts = [t for t in ts if t.name in set(config.outputs)]
    if not ts:
        raise ValueError(f"wave {config.index}: no targets in play")
    return ts


def _design(kind, region, n, rng, starts):
    if n <= 0:
        return np.empty((0, region.dims)), "none"
    if kind == "grid":
        return grid_design(n, region.lower, region.upper), "grid"
    if kind == "pool":
        return pool_design(region, n, rng, start_points=starts)
    return region_design(region, n, rng, start_points=starts)


def _member_starts(region, archive):
    if archive is None or len(archive.X) == 0:
        return None
    m = region.contains(archive.X)
    return archive.X[m] if m.any() else None


def run_wave(config, region, targets, simulator, seed=0, workers=1, archive=None,
             stop_ratio=0.1, max_frac_inconsistent=0.05, diag_frac_large=0.1):
    """One wave: design, simulate, emulate, diagnose, cut, and measure the retained volume."""
    rng = np.random.default_rng([int(seed), int(config.index)])
    in_play = _targets_in_play(config, targets)
    col = {n: i for i, n in enumerate(simulator.output_names)}
    if archive is None:
        archive = RunArchive(simulator.input_names, simulator.output_names)
    starts = _member_starts(region, archive)

    try:
        X, sampler = _design(config.design, region, config.n_runs, rng, starts)
        Xd, _ = _design("maximin", region, config.n_diagnostic, rng,
                        starts if starts is not None else (X if len(X) else None))
    except (AcceptanceTooLow, ValueError) as err:
        if isinstance(err, ValueError) and "start point" not in str(err):
            raise
        raise EmptyRegion(f"wave {config.index}: no members found to design runs ({err})") from err
    except SamplerStuck as err:
        raise EmptyRegion(f"wave {config.index}: sampler stuck ({err})") from err
    Y, ok = simulator.evaluate(X, workers=workers)
    Yd, okd = simulator.evaluate(Xd, workers=workers) if len(Xd) else (
        np.empty((0, len(col))), np.empty(0, dtype=bool))
    n_before = len(archive.X)
    archive.add(X, Y, ok, config.index, "train")
    archive.add(Xd, Yd, okd, config.index, "diagnostic")
    log.info("wave %d: %d runs (%d converged), %d diagnostic", config.index, len(X), ok.sum(), len(Xd))

    # training data
    if config.training_scope == "new":
        tmask = np.zeros(len(archive.X), dtype=bool)
        tmask[n_before:n_before + len(X)] = True
    elif config.training_scope == "all":
        tmask = archive.role == "train"
    else:
        tmask = (archive.role == "train") & region.contains(archive.X)
    tmask &= archive.ok
    Xt, Yt = archive.X[tmask], archive.Y[tmask]
    Xt, uniq = np.unique(Xt, axis=0, return_index=True)
    Yt = Yt[uniq]
    Xh, Yh = Xd[okd], Yd[okd]

    emulators, used, reports, deferred = [], [], [], []
    for t in in_play:
        y = Yt[:, col[t.name]]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                em = fit_emulator(Xt, y, config.settings, name=t.name)
        except (FitError, ValueError) as err:
            log.warning("wave %d: %s not fitted (%s)", config.index, t.name, err)
            deferred.append(t.name)
            continue
        if len(Xh):
            rep = diagnose(em, Xh, Yh[:, col[t.name]], target=t,
                           cutoff=config.cutoffs.get("I_M") or ARCHIVE_CUTOFF,
                           max_frac_large=diag_frac_large,
                           max_frac_inconsistent=max_frac_inconsistent)
            reports.append(rep)
            if not rep.passed:
                deferred.append(t.name)
                continue
        emulators.append(em)
        used.append(t)
    if not emulators:
        raise DiagnosticsFailure(f"wave {config.index}: no output passed diagnostics",
                                 report=[r.to_dict() for r in reports])
    cut = WaveCut(emulators, used, config.cutoffs, wave=config.index)

    # combined safety check on held-out runs
    safety = {"n_true_acceptable": 0, "n_discarded": 0, "rate": 0.0}
    if len(Xh):
        held = RunArchive(simulator.input_names, simulator.output_names, Xd[okd], Yd[okd],
                          np.ones(len(Xh), dtype=bool), np.zeros(len(Xh), int),
                          np.full(len(Xh), "diagnostic", dtype=object))
        true_ok = held.acceptable(used)
        if true_ok.any():
            lost = ~cut.accepts(Xh[true_ok])
            safety = {"n_true_acceptable": int(true_ok.sum()), "n_discarded": int(lost.sum()),
                      "rate": float(lost.mean())}
            if safety["rate"] > max_frac_inconsistent:
                raise DiagnosticsFailure(
                    f"wave {config.index}: emulator cut discards {safety['rate']:.1%} of "
                    f"acceptable held-out runs", report=safety)

    # retained fraction of the previous region
    new_region = region.with_cut(cut)
    starts = _member_starts(region, archive)
    try:
        S, vsampler = sample_region(region, config.n_volume, rng, start_points=starts)
    except (ValueError, SamplerStuck) as err:
        raise EmptyRegion(f"wave {config.index}: cannot sample previous region ({err})") from err
    member = new_region.contains(S)
    if not member.any():
        raise EmptyRegion(f"wave {config.index}: no sampled point survives the cut")
    new_region = new_region.shrink_to(S[member])
    frac = float(np.mean(new_region.contains(S)))

    all_emulated = not deferred and len(used) == len(in_play)
    ratio = float(cut.variance_ratio(S[member][:2000]).max())
    stop = all_emulated and ratio < stop_ratio

    wave_runs = archive.wave == config.index
    all_targets = [t for t in targets if t.dataset in config.datasets]
    acc = archive.acceptable(all_targets) & wave_runs & (archive.role == "train")
    n_conv = int(ok.sum())
    # cumulative and verified fractions are rescaled by the campaign
    row = LedgerRow(
        wave=config.index, datasets="".join(config.datasets), n_runs=len(X), n_converged=n_conv,
        emulated=len(used), deferred=len(deferred), fraction=frac, cumulative=frac,
        acceptable_runs=int(acc.sum()),
        verified_fraction=float(acc.sum() / len(X)) if len(X) else 0.0,
        stop=bool(stop), sampler=f"{sampler}/{vsampler}",
    )
    return WaveResult(config, new_region, cut, row, reports, deferred, X, stop,
                      {**safety, "max_variance_ratio": ratio})


# --------------------------------------------------------------------- campaign


@dataclass
class CampaignResult:
    region: Region
    ledger: VolumeLedger
    archive: RunArchive
    waves: list
    stopped: str | None = None


def _save_wave(out, result, archive, ledger):
    wdir = os.path.join(out, f"wave_{result.config.index}")
    io.write_matrix_csv(os.path.join(wdir, "design.csv"), result.design, archive.input_names)
    archive.select(archive.wave == result.config.index).to_csv(os.path.join(wdir, "runs.csv"))
    io.write_json(os.path.join(wdir, "emulators.json"), result.cut.to_dict())
    io.write_json(os.path.join(wdir, "diagnostics.json"), {
        "outputs": [r.to_dict() for r in result.diagnostics],
        "deferred": result.deferred, "safety": result.safety, "stop": result.stop})
    archive.to_csv(os.path.join(out, "runs.csv"))
    ledger.to_csv(os.path.join(out, "ledger.csv"))
    io.write_json(os.path.join(out, "state.json"), {
        "completed": result.config.index,
        "lower": result.region.lower.tolist(), "upper": result.region.upper.tolist(),
        "stop": result.stop})


def _load_state(out, simulator):
    st = io.read_json(os.path.join(out, "state.json"))
    ledger = VolumeLedger.from_csv(os.path.join(out, "ledger.csv"))
    archive = RunArchive.from_csv(os.path.join(out, "runs.csv"), simulator.input_names,
                                  simulator.output_names)
    cuts = [WaveCut.from_dict(io.read_json(os.path.join(out, f"wave_{r.wave}", "emulators.json")))
            for r in ledger.rows]
    region = Region(np.array(st["lower"]), np.array(st["upper"]), cuts)
    archive = archive.select(np.isin(archive.wave, [r.wave for r in ledger.rows]))
    return st, ledger, archive, region


def run_campaign(schedule, targets, simulator, seed=0, workers=1, out=None, resume=False,
                 region=None, stop_ratio=0.1):
    """Run waves in order until the schedule ends, the region empties, or the stop rule fires.

    When the stop rule fires, waves that bring no new dataset are skipped.
    """
    validate_schedule(schedule)
    region = region or Region(simulator.lower, simulator.upper)
    ledger = VolumeLedger()
    archive = RunArchive(simulator.input_names, simulator.output_names)
    waves, done, stopped_sets = [], set(), None
    if resume and out and os.path.exists(os.path.join(out, "state.json")):
        st, ledger, archive, region = _load_state(out, simulator)
        done = {r.wave for r in ledger.rows}
        if st.get("stop"):
            last = next(w for w in schedule if w.index == st["completed"])
            stopped_sets = set(last.datasets)
        log.info("resuming after wave %s", st["completed"])
    stopped = None
    for cfg in schedule:
        if cfg.index in done:
            continue
        if stopped_sets is not None and set(cfg.datasets) <= stopped_sets:
            continue
        stopped_sets = None
        try:
            res = run_wave(cfg, region, targets, simulator, seed, workers, archive, stop_ratio)
        except (EmptyRegion, DiagnosticsFailure):
            if out:
                ledger.to_csv(os.path.join(out, "ledger.csv"))
                archive.to_csv(os.path.join(out, "runs.csv"))
            raise
        prev = ledger.rows[-1].cumulative if ledger.rows else 1.0
        res.ledger.cumulative = prev * res.ledger.fraction
        res.ledger.verified_fraction *= prev
        ledger.append(res.ledger)
        region = res.region
        waves.append(res)
        if out:
            _save_wave(out, res, archive, ledger)
        log.info("wave %d: fraction %.4g cumulative %.4g", cfg.index, res.ledger.fraction,
                 res.ledger.cumulative)
        if res.stop:
            stopped = f"stop rule at wave {cfg.index}"
            stopped_sets = set(cfg.datasets)
    return CampaignResult(region, ledger, archive, waves, stopped)
