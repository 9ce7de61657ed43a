import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histmatch.analysis import (
    SampleSet, hdr_levels, input_output_informativeness, joint_constraint_matrix, pair_density,
    pass_proportions, sign_split, variance_resolution, variance_resolution_pairs,
)
from histmatch.matching import ObservationTarget, RunArchive

NAMES = ("a", "b", "c")


def _uniform(n=20000, d=3, seed=0):
    return SampleSet("u", np.random.default_rng(seed).uniform(-1, 1, (n, d)), NAMES[:d])


def test_resolution_of_identical_samples_is_zero():
    u = _uniform()
    assert variance_resolution(u, u) == 0.0
    assert variance_resolution(u, u, [1]) == 0.0


def test_halved_spread_gives_three_quarters():
    u = _uniform()
    v = SampleSet("v", u.X * np.array([0.5, 1.0, 1.0]), NAMES)
    assert variance_resolution(u, v, [0]) == pytest.approx(0.75, abs=1e-12)
    assert variance_resolution(u, v) == pytest.approx(0.75, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 1000))
def test_resolution_affine_invariant(scale, shift, seed):
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(50, 2))
    V = U[:25] * 0.7
    a = variance_resolution(U, V)
    b = variance_resolution(U * scale + shift, V * scale + shift)
    assert b == pytest.approx(a, abs=1e-9)


def test_singular_reference_names_input():
    X = np.random.default_rng(0).uniform(size=(30, 3))
    X[:, 2] = 0.5
    with pytest.raises(np.linalg.LinAlgError, match="c"):
        variance_resolution(SampleSet("u", X, NAMES), SampleSet("v", X[:10], NAMES))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.1, 1.0), min_size=3, max_size=3), st.integers(0, 100))
def test_pair_resolution_dominates_single(half_widths, seed):
    u = _uniform(20000, 3, seed)
    keep = np.all(np.abs(u.X) <= np.array(half_widths), axis=1)
    if keep.sum() < 50:
        return
    v = u.subset(keep, "v")
    R = variance_resolution_pairs(u, v)
    for i in range(3):
        for j in range(3):
            if i != j:
                assert R[i, j] >= R[i, i] - 0.02


def test_joint_constraint_examples():
    M = joint_constraint_matrix(_uniform(10000))
    off = M[~np.eye(3, dtype=bool)]
    assert np.all(off < 0.01)
    assert np.all(np.diag(M) == 0.0)
    t = np.linspace(-1, 1, 50)
    L = joint_constraint_matrix(np.column_stack([t, t, t ** 2]))
    assert L[0, 1] == pytest.approx(1.0)
    assert np.allclose(L, L.T) and np.all((L >= 0) & (L <= 1))
    flat = joint_constraint_matrix(np.column_stack([t, np.zeros(50)]))
    assert np.isnan(flat[0, 1]) and flat[0, 0] == 0.0


def _with_outputs(X):
    Y = np.column_stack([X[:, 0], np.zeros(len(X))])
    return SampleSet("w1", X, NAMES, Y, ("upper", "flat"))


def test_informativeness_examples():
    s = _with_outputs(_uniform(20000).X)
    targets = [ObservationTarget.from_window("upper", 0.0, 1.0),
               ObservationTarget.from_window("flat", -1.0, 1.0)]
    info = input_output_informativeness(s, targets)
    assert info.matrix[0, 0] == pytest.approx(0.75, abs=0.02)
    assert np.allclose(info.matrix[:, 1], 0.0)
    assert np.all(np.abs(info.matrix[1:, 0]) < 0.05)
    assert not info.low_confidence.any()
    few = input_output_informativeness(s.subset(np.arange(len(s)) < 12, "few"), targets)
    assert few.low_confidence[0]


def test_sign_split_examples():
    s = _with_outputs(_uniform(10000).X)
    sp = sign_split(s, "upper")
    n = len(s)
    assert abs(sp.summary["n_positive"] - n / 2) < 3 * np.sqrt(n / 4)
    assert sp.summary["positive"]["upper"]["min"] > 0
    pos = s.subset(s.X[:, 0] > 0, "pos")
    with pytest.warns(RuntimeWarning, match="empty"):
        one = sign_split(pos, "upper")
    assert len(one.negative) == 0 and one.summary["negative"]["upper"] is None
    with pytest.raises(KeyError):
        sign_split(s, "missing")


def test_pass_proportions():
    a = RunArchive(("x",), ("f",))
    X = np.linspace(-1, 1, 200)[:, None]
    a.add(X, X.copy(), np.ones(200, dtype=bool), 1, "train")
    a.add(X[:10], np.full((10, 1), 5.0), np.ones(10, dtype=bool), 2, "train")
    half = ObservationTarget.from_window("f", 0.0, 2.0)
    waves, P = pass_proportions(a, [half])
    assert list(waves) == [1, 2]
    assert P[0, 0] == pytest.approx(0.5) and P[1, 0] == 0.0
    _, P = pass_proportions(a, [ObservationTarget.from_window("f", -2.0, 6.0)])
    assert np.all(P == 1.0)
    with pytest.raises(ValueError):
        pass_proportions(RunArchive(("x",), ("f",)), [half])


def test_density_and_hdr():
    X = _uniform(5000).X
    H, ex, ey = pair_density(X, 0, 1, bins=10, lower=-1, upper=1)
    assert H.sum() == 5000 and len(ex) == 11
    counts = np.array([[10, 0], [5, 5]])
    lv = hdr_levels(counts)
    assert lv[0.5] == 10 and lv[0.9] == 5
