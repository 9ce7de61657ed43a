import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import toy_schedule, toy_targets
from oracles import toy_roots
from histmatch.design import Region
from histmatch.emulation import EmulatorSettings, fit_emulator
from histmatch.errors import DiagnosticsFailure, EmptyRegion
from histmatch.matching import (
    LedgerRow, ObservationTarget, RunArchive, VolumeLedger, WaveConfig, WaveCut,
    combined_implausibility, implausibility, passes_cutoffs, region_from_dict, region_to_dict,
    run_campaign, run_wave, validate_schedule,
)
from histmatch.simulators import Toy1DSimulator


def test_implausibility_examples():
    t = ObservationTarget("y", 1.0, 0.3, 0.4)
    assert implausibility(1.0, 0.0, t) == 0.0
    sd = math.sqrt(0.11 + 0.25)
    assert implausibility(1.0 + 3 * sd, 0.11, t) == pytest.approx(3.0, abs=1e-12)


def test_up_trend_window_endpoints():
    t = ObservationTarget.from_window("up", 0.182, 2.303)
    assert t.z == pytest.approx(1.2425) and math.sqrt(t.obs_variance) == pytest.approx(0.3535, abs=1e-4)
    assert t.implausibility(0.182) == pytest.approx(3.0, abs=1e-9)
    assert t.implausibility(2.303) == pytest.approx(3.0, abs=1e-9)


def test_implausibility_errors():
    with pytest.raises(ValueError):
        implausibility(0.0, 0.0, ObservationTarget("y", 1.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        implausibility(0.0, -1.0, ObservationTarget("y", 1.0, 0.1, 0.0))
    with pytest.raises(ValueError):
        ObservationTarget("y", 0.0, -0.1, 0.1)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(0, 10), st.floats(-50, 50), st.floats(0.01, 5),
       st.floats(0, 5), st.floats(0.01, 100))
def test_affine_invariance(mean, var, z, md, me, c):
    t = ObservationTarget("y", z, md, me)
    scaled = ObservationTarget("y", c * z + 7.0, c * md, c * me)
    a = implausibility(mean, var, t)
    b = implausibility(c * mean + 7.0, c * c * var, scaled)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


def test_combined_examples():
    assert combined_implausibility([1, 5, 2]) == (5.0, 2.0, 1.0)
    assert combined_implausibility([4]) == (4.0, None, None)
    with pytest.raises(ValueError):
        combined_implausibility([])


def test_wave_one_rule_ignores_largest():
    cut = {"I_M": None, "I_2M": 3.0, "I_3M": 2.9}
    assert passes_cutoffs(np.array([[100, 2.9, 2.8]]), cut)[0]
    assert not passes_cutoffs(np.array([[100, 3.1, 2.8]]), cut)[0]
    # absent measures impose nothing
    assert passes_cutoffs(np.array([[2.0]]), {"I_M": 3.0, "I_2M": 1.0})[0]


def test_wave_config_invariants():
    with pytest.raises(ValueError, match="at least one cutoff"):
        WaveConfig(1, cutoffs={})
    with pytest.raises(ValueError, match="positive"):
        WaveConfig(1, cutoffs={"I_M": -1})
    with pytest.raises(ValueError, match="unknown wave keys"):
        WaveConfig.from_dict({"index": 1, "runs": 5})
    w = WaveConfig(3, datasets=["A", "B"], cutoffs={"I_M": 3, "I_2M": 2.9})
    assert WaveConfig.from_dict(w.to_dict()).to_dict() == w.to_dict()


def test_schedule_must_add_datasets_monotonically():
    validate_schedule([WaveConfig(1), WaveConfig(2, datasets=("A", "B"))])
    with pytest.raises(ValueError, match="drops"):
        validate_schedule([WaveConfig(1, datasets=("A", "B")), WaveConfig(2)])


def _row(wave, fraction, cumulative):
    return LedgerRow(wave, "A", 10, 10, 1, 0, fraction, cumulative, 0, 0.0, False, "rejection")


def test_ledger_product_rule(tmp_path):
    led = VolumeLedger()
    led.append(_row(1, 0.5, 0.5))
    led.append(_row(2, 0.2, 0.1))
    with pytest.raises(ValueError):
        led.append(_row(3, 0.5, 0.04))
    led.to_csv(tmp_path / "ledger.csv")
    back = VolumeLedger.from_csv(tmp_path / "ledger.csv")
    assert back.rows == led.rows


def test_archive_round_trip(tmp_path):
    a = RunArchive(("x", "y"), ("f",))
    a.add(np.array([[0.1, 0.2], [0.3, 0.4]]), np.array([[1.0], [np.nan]]),
          np.array([True, False]), 1, "train")
    a.to_csv(tmp_path / "runs.csv")
    b = RunArchive.from_csv(tmp_path / "runs.csv", ("x", "y"), ("f",))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.ok, b.ok)
    assert b.Y[0, 0] == 1.0 and np.isnan(b.Y[1, 0])
    t = ObservationTarget("f", 1.0, 0.1, 0.0)
    assert list(b.acceptable([t])) == [True, False]
    with pytest.raises(ValueError, match="layout"):
        RunArchive.from_csv(tmp_path / "runs.csv", ("x", "z"), ("f",))


def _toy_wave1(seed=0, **kw):
    sched = toy_schedule()
    return run_wave(sched[0], Region(Toy1DSimulator.lower, Toy1DSimulator.upper), toy_targets(),
                    Toy1DSimulator(), seed=seed, **kw)


def test_toy_wave_one_keeps_every_root():
    res = _toy_wave1()
    roots = toy_roots()
    assert len(roots) >= 2
    assert np.all(res.region.contains(np.array(roots)[:, None]))
    assert 0 < res.ledger.fraction < 1


def test_no_active_cut_keeps_everything():
    cfg = WaveConfig(1, n_runs=8, design="grid", strategy="fixed", n_diagnostic=0,
                     cutoffs={"I_M": math.inf}, emulator=toy_schedule()[0].emulator, n_volume=500)
    res = run_wave(cfg, Region(Toy1DSimulator.lower, Toy1DSimulator.upper), toy_targets(),
                   Toy1DSimulator())
    assert res.ledger.fraction == 1.0


def test_perfect_emulator_keeps_acceptable_set():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (30, 2))
    f = lambda Z: 1.0 + 2.0 * Z[:, 0] - Z[:, 1]
    em = fit_emulator(X, f(X), EmulatorSettings(strategy="linear"))
    assert em.spec.sigma_w2 == pytest.approx(0.0, abs=1e-20)
    t = ObservationTarget("f", 0.5, 0.1, 0.1)
    cut = WaveCut([em], [t], {"I_M": 3.0})
    S = rng.uniform(-1, 1, (5000, 2))
    truth = np.abs(f(S) - 0.5) / math.sqrt(0.02) <= 3.0
    assert np.array_equal(cut.accepts(S), truth)


def test_region_serialization_preserves_membership():
    res = _toy_wave1()
    back = region_from_dict(region_to_dict(res.region))
    S = np.linspace(Toy1DSimulator.lower, Toy1DSimulator.upper, 400)
    assert np.array_equal(back.contains(S), res.region.contains(S))


def test_toy_campaign_is_monotone_and_deterministic(tmp_path):
    sim = Toy1DSimulator()
    a = run_campaign(toy_schedule(), toy_targets(), sim, seed=3)
    b = run_campaign(toy_schedule(), toy_targets(), sim, seed=3)
    assert [vars(r) for r in a.ledger.rows] == [vars(r) for r in b.ledger.rows]
    cum = a.ledger.cumulative
    assert all(y <= x for x, y in zip(cum, cum[1:]))
    assert cum[-1] == pytest.approx(np.prod([r.fraction for r in a.ledger.rows]), rel=1e-12)
    # X_2 is inside X_1
    S = np.linspace(sim.lower, sim.upper, 2000)
    inner = a.region.contains(S)
    outer = Region(sim.lower, sim.upper, a.region.cuts[:1]).contains(S)
    assert np.all(outer[inner])


def test_resume_matches_uninterrupted_run(tmp_path):
    sim = Toy1DSimulator()
    full = run_campaign(toy_schedule(), toy_targets(), sim, seed=5, out=str(tmp_path / "full"))
    part = tmp_path / "part"
    run_campaign(toy_schedule()[:1], toy_targets(), sim, seed=5, out=str(part))
    resumed = run_campaign(toy_schedule(), toy_targets(), sim, seed=5, out=str(part), resume=True)
    assert [vars(r) for r in resumed.ledger.rows] == [vars(r) for r in full.ledger.rows]
    assert (part / "wave_2" / "emulators.json").exists()
    assert (part / "ledger.csv").read_text() == (tmp_path / "full" / "ledger.csv").read_text()


def test_impossible_target_empties_region(tmp_path):
    with pytest.raises(EmptyRegion):
        run_campaign(toy_schedule(), [ObservationTarget("f", 100.0, 0.0, 0.05)],
                     Toy1DSimulator(), out=str(tmp_path))
    assert (tmp_path / "runs.csv").exists()


class NoisySimulator(Toy1DSimulator):
    def evaluate(self, X, workers=1):
        X = np.atleast_2d(X)
        y = np.sin(40 * X[:, 0]) * 5
        return y[:, None], np.ones(len(X), dtype=bool)


def test_overconfident_emulators_abort_wave():
    cfg = WaveConfig(1, n_runs=20, n_diagnostic=50, strategy="fixed",
                     emulator={"theta": 5.0, "sigma_u2": 1e-6, "sigma_w2": 1e-6})
    with pytest.raises(DiagnosticsFailure) as err:
        run_wave(cfg, Region(NoisySimulator.lower, NoisySimulator.upper),
                 [ObservationTarget("f", 0.0, 0.5, 0.5)], NoisySimulator())
    assert err.value.report
