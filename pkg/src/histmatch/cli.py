"""Command-line entry point: ``histmatch <command> --manifest M ...``."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys

import numpy as np

from . import __version__, io
from .analysis import (
    ANALYSES, SampleSet, hdr_levels, input_output_informativeness, joint_constraint_matrix,
    pair_density, pass_proportions, sign_split, variance_resolution_pairs,
)
from .design import maximin_lhs, region_design, sample_region
from .emulation import diagnose
from .errors import DiagnosticsFailure, DomainError, EmptyRegion
from .io import CSVParseError
from .manifest import ManifestError, load_manifest
from .matching import RunArchive, WaveCut, _load_state, run_campaign

EXIT_OK, EXIT_VALIDATION, EXIT_EMPTY, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("histmatch")


class ValidationError(Exception):
    pass


def _manifest(args):
    if not args.manifest:
        raise ValidationError("--manifest is required")
    m = load_manifest(args.manifest)
    if getattr(args, "seed", None) is not None:
        m.seed = args.seed
    if getattr(args, "workers", None) is not None:
        m.workers = args.workers
    return m


def _read_points(path, n_inputs):
    _, X = io.read_matrix_csv(path)
    if X.shape[1] != n_inputs:
        raise CSVParseError(f"{path}: expected {n_inputs} input columns, got {X.shape[1]}")
    return X


def _check_box(X, sim):
    for r, x in enumerate(X):
        bad = np.flatnonzero((x < sim.lower) | (x > sim.upper) | ~np.isfinite(x))
        if len(bad):
            j = bad[0]
            raise DomainError(f"point {r + 1}: coordinate {sim.input_names[j]} = {x[j]} "
                              f"outside [{sim.lower[j]}, {sim.upper[j]}]")


def _load_region(run_dir, sim):
    if not os.path.exists(os.path.join(run_dir, "state.json")):
        raise ValidationError(f"{run_dir}: no completed campaign (state.json missing)")
    _, ledger, archive, region = _load_state(run_dir, sim)
    return ledger, archive, region


# ----------------------------------------------------------------------- commands


def cmd_simulate(args):
    m = _manifest(args)
    sim = m.simulator
    if args.point:
        try:
            X = np.array([[float(v) for v in args.point.split(",")]])
        except ValueError as err:
            raise ValidationError(f"--point: {err}") from None
        if X.shape[1] != len(sim.input_names):
            raise ValidationError(f"--point needs {len(sim.input_names)} values")
    elif args.points:
        X = _read_points(args.points, len(sim.input_names))
    else:
        raise ValidationError("give --point or --points")
    _check_box(X, sim)
    Y, ok = sim.evaluate(X, workers=m.workers)
    out = args.out or "-"
    header = [*sim.input_names, *sim.output_names, "converged"]
    rows = ([*x, *y, bool(c)] for x, y, c in zip(X, Y, ok))
    if out == "-":
        sys.stdout.write(io.csv_text(header, rows))
    else:
        io.write_csv(out, header, rows)
    return EXIT_OK


def cmd_design(args):
    m = _manifest(args)
    sim = m.simulator
    if args.n is None or args.n < 1:
        raise ValidationError("--n must be a positive count")
    if args.run:
        _, archive, region = _load_region(args.run, sim)
        starts = archive.X[region.contains(archive.X)] if len(archive.X) else None
        X, _ = region_design(region, args.n, m.seed, start_points=starts)
    else:
        X = maximin_lhs(args.n, len(sim.input_names), m.seed, lower=sim.lower, upper=sim.upper)
    io.write_matrix_csv(_out_file(args, "design.csv"), X, sim.input_names)
    return EXIT_OK


def _out_file(args, default):
    return args.out or default


def cmd_match(args):
    m = _manifest(args)
    out = args.out or m.out
    if not out:
        raise ValidationError("--out (or manifest 'out') is required")
    os.makedirs(out, exist_ok=True)
    dest = os.path.join(out, "manifest.json")
    if not (args.resume and os.path.exists(dest)):
        shutil.copyfile(m.source, dest + ".tmp")
        os.replace(dest + ".tmp", dest)
    try:
        res = run_campaign(m.schedule, m.targets, m.simulator, seed=m.seed, workers=m.workers,
                           out=out, resume=args.resume, stop_ratio=m.stop_ratio)
    except EmptyRegion as err:
        io.write_json(os.path.join(out, "status.json"), {"status": "empty-region", "message": str(err)})
        print(f"empty region: {err}", file=sys.stderr)
        return EXIT_EMPTY
    except DiagnosticsFailure as err:
        io.write_json(os.path.join(out, "status.json"), {
            "status": "diagnostics-failure", "message": str(err), "report": err.report})
        raise
    datasets = sorted({t.dataset for t in m.targets if t.dataset in m.schedule[-1].datasets})
    final_targets = [t for t in m.targets if t.dataset in datasets]
    acc = res.archive.acceptable(final_targets)
    res.archive.select(acc).to_csv(os.path.join(out, "acceptable.csv"))
    io.write_json(os.path.join(out, "status.json"), {
        "status": "complete", "stopped": res.stopped, "waves": len(res.ledger.rows),
        "cumulative_fraction": res.ledger.rows[-1].cumulative if res.ledger.rows else 1.0,
        "acceptable_runs": int(acc.sum())})
    for r in res.ledger.rows:
        print(f"wave {r.wave} [{r.datasets}] fraction {r.fraction:.4g} "
              f"cumulative {r.cumulative:.4g} acceptable {r.acceptable_runs}")
    return EXIT_OK


def cmd_sample(args):
    m = _manifest(args)
    if not args.run:
        raise ValidationError("--run is required")
    if args.n is None or args.n < 0:
        raise ValidationError("--n must be a non-negative count")
    _, archive, region = _load_region(args.run, m.simulator)
    starts = archive.X[region.contains(archive.X)] if len(archive.X) else None
    try:
        S, how = sample_region(region, args.n, m.seed, start_points=starts)
    except ValueError as err:
        print(f"empty region: {err}", file=sys.stderr)
        return EXIT_EMPTY
    io.write_matrix_csv(_out_file(args, "samples.csv"), S, m.simulator.input_names)
    log.info("sampled %d points by %s", len(S), how)
    return EXIT_OK


def cmd_diagnose(args):
    m = _manifest(args)
    if not args.run or args.wave is None:
        raise ValidationError("--run and --wave are required")
    wdir = os.path.join(args.run, f"wave_{args.wave}")
    if not os.path.isdir(wdir):
        raise ValidationError(f"{wdir}: no such wave directory")
    cut = WaveCut.from_dict(io.read_json(os.path.join(wdir, "emulators.json")))
    runs = RunArchive.from_csv(os.path.join(wdir, "runs.csv"), m.simulator.input_names,
                               m.simulator.output_names)
    hold = runs.select((runs.role == "diagnostic") & runs.ok)
    col = {n: i for i, n in enumerate(m.simulator.output_names)}
    cutoff = cut.cutoffs.get("I_M") or 3.0
    reports = [diagnose(em, hold.X, hold.Y[:, col[t.name]], target=t, cutoff=cutoff).to_dict()
               for em, t in zip(cut.emulators, cut.targets)]
    io.write_json(_out_file(args, os.path.join(args.run, f"diagnose_wave_{args.wave}.json")),
                  {"wave": args.wave, "n_holdout": len(hold.X), "outputs": reports})
    failed = [r["name"] for r in reports if not r["passed"]]
    print(f"wave {args.wave}: {len(reports) - len(failed)}/{len(reports)} outputs pass")
    return EXIT_OK


def _analysis_sets(m, run_dir, which):
    runs_csv = os.path.join(run_dir, "runs.csv")
    if not os.path.exists(runs_csv):
        raise ValidationError(f"{run_dir}: no campaign archive (runs.csv missing)")
    sim = m.simulator
    archive = RunArchive.from_csv(runs_csv, sim.input_names, sim.output_names)
    w1 = archive.select((archive.wave == archive.wave.min()) & archive.ok)
    wave1 = SampleSet("wave-1", w1.X, sim.input_names, w1.Y, sim.output_names)
    if which == "last-wave":
        last = archive.select((archive.wave == archive.wave.max()) & archive.ok)
        final = SampleSet("last-wave", last.X, sim.input_names, last.Y, sim.output_names)
    else:
        ds = sorted({t.dataset for t in m.targets})
        acc = archive.select(archive.acceptable(m.targets))
        final = SampleSet("acceptable-" + "".join(ds), acc.X, sim.input_names, acc.Y,
                          sim.output_names)
    return archive, wave1, final


def cmd_analyze(args):
    if args.analysis not in ANALYSES:
        raise ValidationError(f"unknown analysis {args.analysis!r}; available: {', '.join(ANALYSES)}")
    m = _manifest(args)
    if not args.run:
        raise ValidationError("--run is required")
    archive, wave1, final = _analysis_sets(m, args.run, args.set)
    names = m.simulator.input_names
    out = args.out or os.path.join(args.run, "analysis")
    path = os.path.join(out, f"{args.analysis}.csv")
    a = args.analysis
    if a == "variance-resolution":
        if len(final) < 2:
            raise ValidationError(f"sample {final.label!r} has {len(final)} runs; need at least 2")
        R = variance_resolution_pairs(wave1, final)
        io.write_csv(path, ["input", *names], ([n, *row] for n, row in zip(names, R)))
    elif a == "joint-constraint":
        if len(final) < 3:
            raise ValidationError(f"sample {final.label!r} has {len(final)} runs; need at least 3")
        R = joint_constraint_matrix(final)
        io.write_csv(path, ["input", *names], ([n, *row] for n, row in zip(names, R)))
    elif a == "informativeness":
        inf = input_output_informativeness(wave1, m.targets)
        tn = [t.name for t in m.targets]
        rows = [[n, *row] for n, row in zip(names, inf.matrix)]
        rows.append(["n_pass", *inf.n_pass])
        rows.append(["low_confidence", *inf.low_confidence])
        io.write_csv(path, ["input", *tn], rows)
    elif a == "pass-proportions":
        waves, P = pass_proportions(archive, m.targets)
        io.write_csv(path, ["wave", *(t.name for t in m.targets)],
                     ([int(w), *row] for w, row in zip(waves, P)))
    elif a == "sign-split":
        if not args.output:
            raise ValidationError("sign-split needs --output")
        try:
            sp = sign_split(final, args.output)
        except KeyError as err:
            raise ValidationError(str(err)) from None
        io.write_json(os.path.join(out, "sign-split.json"), {"output": args.output, **sp.summary})
        rows = []
        for side in (sp.positive, sp.negative):
            rows += _density_rows(side, m.simulator, args.bins)
        io.write_csv(os.path.join(out, "sign-split-pairs-density.csv"),
                     ["set", "i", "j", "bin_i", "bin_j", "count", "hdr50", "hdr90"], rows)
        return EXIT_OK
    elif a == "pairs-density":
        io.write_csv(path, ["set", "i", "j", "bin_i", "bin_j", "count", "hdr50", "hdr90"],
                     _density_rows(final, m.simulator, args.bins))
    return EXIT_OK


def _density_rows(s, sim, bins):
    rows = []
    if len(s) == 0:
        return rows
    d = s.X.shape[1]
    for i in range(d):
        for j in range(i + 1, d):
            H, _, _ = pair_density(s.X, i, j, bins, sim.lower, sim.upper)
            lv = hdr_levels(H)
            for bi, bj in zip(*np.nonzero(H)):
                rows.append([s.label, sim.input_names[i], sim.input_names[j], int(bi), int(bj),
                             int(H[bi, bj]), int(H[bi, bj] >= lv[0.5]), int(H[bi, bj] >= lv[0.9])])
    return rows


# ------------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="histmatch", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--manifest", required=True, help="campaign manifest (JSON)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--out", default=None)

    s = sub.add_parser("simulate", help="evaluate the simulator at points")
    common(s)
    s.add_argument("--point", help="comma-separated input values")
    s.add_argument("--points", help="CSV of points with a header row")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("design", help="maximin Latin hypercube, optionally inside a campaign region")
    common(s)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--run", help="campaign directory whose final region to design in")
    s.set_defaults(func=cmd_design)

    s = sub.add_parser("match", help="run the history-matching campaign")
    common(s)
    s.add_argument("--resume", action="store_true", help="continue after the last completed wave")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("sample", help="uniform sample of a campaign's final region")
    common(s)
    s.add_argument("--run", required=True)
    s.add_argument("--n", type=int, required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("diagnose", help="re-run emulator diagnostics for one wave")
    common(s)
    s.add_argument("--run", required=True)
    s.add_argument("--wave", type=int, required=True)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("analyze", help="post-match analytics")
    common(s)
    s.add_argument("--run", required=True)
    s.add_argument("--analysis", required=True, help=", ".join(ANALYSES))
    s.add_argument("--set", choices=("acceptable", "last-wave"), default="acceptable")
    s.add_argument("--output", help="output name for sign-split")
    s.add_argument("--bins", type=int, default=20)
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ManifestError, CSVParseError, DomainError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except EmptyRegion as err:
        print(f"empty region: {err}", file=sys.stderr)
        return EXIT_EMPTY
    except Exception as err:  # noqa: BLE001
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
