import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from histmatch.crosstalk import outputs as xo
from histmatch.crosstalk.model import (
    CONSERVED_PAIRS, DEFAULT_SOLVER, INITIAL_STATE, N_INPUTS, RATE_INDEX, SPECIES_INDEX,
    WILD_TYPE, DomainError, ExperimentSpec, NonConverged, RateConstants, SolverConfig,
    default_parameter_table, derivatives, integrate, jacobian, residual_norm,
    solve_steady_state, to_rate_constants,
)
from histmatch.toy import toy_1d

# rate groups sharing one equation (or coupled pair of equations); scaling a
# whole group rescales time in those equations but not their equilibria
RATE_GROUPS = [
    ("k2", "k1a", "k2a", "k3", "k3a", "V_IAA"),
    ("k16", "k16a", "k17"),
    ("k8", "k9"),
    ("k4", "k5"),
    ("k18a", "k19", "V_CK"),
    ("k12", "k12a", "k13", "V_ACC"),
    ("k6", "k7"),
    ("k10", "k10a", "k11"),
    ("k14", "k15"),
    ("k20a", "k1_v21"),
    ("k22a", "k1_v23", "k1_v24", "k25a"),
]


def _point(seed, spread=0.8):
    return np.random.default_rng(seed).uniform(-spread, spread, N_INPUTS)


def test_tables_have_expected_shape():
    table = default_parameter_table()
    assert len(table.names) == 31
    assert np.all(table.lower <= table.initial) and np.all(table.initial <= table.upper)
    outs = xo.default_output_table()
    assert len(outs) == 32
    counts = {d: sum(o.dataset == d for o in outs) for d in "ABC"}
    assert counts == {"A": 22, "B": 5, "C": 5}
    assert len(xo.required_experiments()) == 11
    assert xo.required_experiments()[0] == WILD_TYPE


def test_scaling_round_trip():
    table = default_parameter_table()
    x = _point(1)
    np.testing.assert_allclose(table.to_scaled(table.to_natural(x)), x, atol=1e-12)
    np.testing.assert_allclose(table.to_natural(-np.ones(N_INPUTS)), table.lower, rtol=1e-12)


def test_out_of_range_coordinate_is_named():
    x = np.zeros(N_INPUTS)
    x[4] = 1.5
    with pytest.raises(DomainError, match="coordinate 4"):
        to_rate_constants(x)


def test_unknown_mutant_rejected():
    with pytest.raises(DomainError):
        ExperimentSpec("xyz")


def test_lambda_range_enforced():
    with pytest.raises(DomainError):
        RateConstants(np.ones(45), lam=20.0)


def test_mutant_overrides():
    x = _point(2)
    wt = to_rate_constants(x)
    assert to_rate_constants(x, ExperimentSpec("pls"))["k6"] == 0.0
    assert to_rate_constants(x, ExperimentSpec("plsetr1"))["k6"] == 0.0
    ratio = default_parameter_table().to_natural(x)
    k6m, k11m = ratio[-2], ratio[-1]
    assert to_rate_constants(x, ExperimentSpec("PLSox"))["k6"] == pytest.approx(wt["k6"] * k6m)
    assert to_rate_constants(x, ExperimentSpec("etr1"))["k11"] == pytest.approx(wt["k11"] * k11m)


@pytest.mark.parametrize("lam_scaled", [False, True])
def test_jacobian_matches_finite_differences(lam_scaled):
    rng = np.random.default_rng(3)
    rates = to_rate_constants(_point(3), ExperimentSpec("wt", {"auxin", "ethylene"}))
    y = rng.uniform(0.05, 1.0, 18)
    J = jacobian(y, rates, lam_scaled)
    h = 1e-6
    fd = np.empty_like(J)
    for j in range(18):
        e = np.zeros(18)
        e[j] = h
        fd[:, j] = (derivatives(y + e, rates, lam_scaled) - derivatives(y - e, rates, lam_scaled)) / (2 * h)
    np.testing.assert_allclose(J, fd, rtol=1e-6, atol=1e-8)


def test_conservation_along_trajectory():
    rates = to_rate_constants(_point(4))
    times = np.concatenate([[0.0], np.geomspace(1e-3, 1e4, 40)])
    ys, ok = integrate(rates, INITIAL_STATE, times)
    assert ok
    for a, b in CONSERVED_PAIRS:
        total = INITIAL_STATE[a] + INITIAL_STATE[b]
        np.testing.assert_allclose(ys[:, a] + ys[:, b], total, atol=1e-9)


def test_initial_point_steady_state_matches_second_integrator():
    table = default_parameter_table()
    x = table.initial_point()
    y = solve_steady_state(x)
    rates = to_rate_constants(x)
    sol = solve_ivp(lambda t, z: derivatives(z, rates), (0.0, 1e6), INITIAL_STATE, method="Radau",
                    jac=lambda t, z: jacobian(z, rates), rtol=1e-10, atol=1e-13)
    assert sol.success
    np.testing.assert_allclose(y, sol.y[:, -1], rtol=1e-6, atol=1e-10)
    assert y[3] + y[4] == pytest.approx(1.0, abs=1e-9)
    assert y[8] + y[9] == pytest.approx(0.3, abs=1e-9)
    assert y[10] + y[11] == pytest.approx(0.3, abs=1e-9)
    assert residual_norm(y, rates) < 1e-8


def test_lambda_scaled_form_shares_equilibrium():
    x = _point(5)
    rates = to_rate_constants(x)
    y = solve_steady_state(x)
    ys, ok = integrate(rates, INITIAL_STATE, [0.0, 1e6], lam_scaled=True)
    assert ok
    np.testing.assert_allclose(ys[-1], y, rtol=1e-6, atol=1e-10)


@pytest.mark.parametrize("group", RATE_GROUPS, ids=lambda g: g[0])
def test_ratio_invariance(group):
    x = _point(6, 0.5)
    spec = ExperimentSpec("PLSox", {"auxin", "cytokinin", "ethylene"})
    base = to_rate_constants(x, spec)
    k = base.values.copy()
    for name in group:
        k[RATE_INDEX[name]] *= 2.0
    doubled = RateConstants(k, base.lam)
    y0 = solve_steady_state(x, spec, rates=base)
    y1 = solve_steady_state(x, spec, rates=doubled)
    np.testing.assert_allclose(y1, y0, rtol=1e-6, atol=1e-10)


def test_outputs_are_deterministic_and_finite():
    x = _point(7)
    a = xo.compute_outputs(x)
    b = xo.compute_outputs(x)
    assert a.converged and b.converged
    assert np.array_equal(a.values, b.values)
    assert a.values.shape == (32,) and np.all(np.isfinite(a.values))


def test_non_convergence_is_reported():
    tight = SolverConfig(max_steps=5)
    with pytest.raises(NonConverged) as err:
        solve_steady_state(_point(8), config=tight)
    assert err.value.experiment == WILD_TYPE
    r = xo.compute_outputs(_point(8), config=tight, strict=False)
    assert not r.converged and r.failed == "wt" and np.all(np.isnan(r.values))


def test_pin_average():
    assert xo.pin_average(1.0, 1.0, 6.0) == 1.0
    assert xo.pin_average(7.0, 0.0, 6.0) == pytest.approx(1.0)


def _states(auxin=1.0):
    y = INITIAL_STATE.copy() + 0.5
    y[SPECIES_INDEX["Auxin"]] = auxin
    return y


def test_output_assembly_examples():
    labels = {c.label for c in xo.required_experiments()}
    states = {lab: _states() for lab in labels}
    v = xo.outputs_from_states(states)
    names = xo.output_names()
    assert v[names.index("pls_Auxin")] == 0.0
    assert v[names.index("wt_Auxin")] == 0.0
    # every ratio output vanishes when all configurations agree
    ratios = [i for i, o in enumerate(xo.default_output_table()) if o.is_ratio]
    assert np.all(v[ratios] == 0.0)


def test_pls_fe_reference_is_pls():
    o = next(o for o in xo.default_output_table() if o.reference is not None
             and o.reference.mutant == "pls")
    assert o.config == ExperimentSpec("pls", {"ethylene"})


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=N_INPUTS, max_size=N_INPUTS))
def test_conservation_at_steady_state(coords):
    try:
        y = solve_steady_state(np.array(coords), config=DEFAULT_SOLVER)
    except NonConverged:
        return
    assert y[3] + y[4] == pytest.approx(1.0, abs=1e-9)
    assert y[8] + y[9] == pytest.approx(0.3, abs=1e-9)
    assert y[10] + y[11] == pytest.approx(0.3, abs=1e-9)


def test_toy_examples():
    assert toy_1d(0.0) == 1.0
    assert toy_1d(np.pi) == pytest.approx(0.1 * np.pi - 1.0)
    assert toy_1d(11 * np.pi / 3) == pytest.approx(0.1 * 11 * np.pi / 3 + 0.5)
    with pytest.raises(DomainError):
        toy_1d(-0.1)
    with pytest.raises(DomainError):
        toy_1d(12.0)
