import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdfembed.errors import InputError, LevelOutOfRange, ZeroVariance
from pdfembed.protocols import (
    UNDEFINED,
    deviations,
    eval_report,
    level_histogram,
    pcc,
    rd,
    replication_ratio,
    scale_similarity,
)


def test_pcc_examples():
    assert pcc([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-12)
    assert pcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(ZeroVariance):
        pcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(ZeroVariance):
        pcc([1], [1])
    with pytest.raises(InputError):
        pcc([1, 2], [1, 2, 3])


def test_pcc_matches_numpy():
    r = np.random.default_rng(0)
    x, y = r.normal(size=(2, 50))
    assert pcc(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-14)


def test_deviation_worked_examples():
    assert deviations(0, 3, 5) == (1.0, 0.6)
    assert deviations(2, 5, 5) == (0.6, 0.6)
    assert deviations(3, 3, 5) == (0.0, 0.0)


def test_rd_examples():
    assert rd([3], [3], 5) == 0.0
    assert rd([0], [3], 5) == 1.0
    assert rd([2], [5], 5) == pytest.approx(0.6)
    # out-of-range predictions are clamped first
    assert rd([-4], [3], 5) == 1.0
    assert rd([9], [0], 5) == 1.0
    with pytest.raises(LevelOutOfRange):
        rd([1], [7], 5)
    with pytest.raises(InputError):
        rd([], [], 5)


def test_scale_similarity():
    assert scale_similarity(0.5, 5) == 2.5
    assert scale_similarity(1.0, 5) == 5.0
    assert scale_similarity(0.0, 5) == 0.0
    np.testing.assert_array_equal(scale_similarity([0.2, 0.4], 5), [1.0, 2.0])
    with pytest.raises(InputError):
        scale_similarity(float("nan"), 5)


def test_replication_ratio():
    assert replication_ratio([5, 4, 3, 0, 1]) == 0.4
    assert replication_ratio([0, 0, 0]) == 0.0
    assert replication_ratio([5, 4, 3, 0, 1], threshold=3) == 0.6
    with pytest.raises(InputError):
        replication_ratio([])


def test_eval_report():
    rep = eval_report([0, 1, 2, 3, 4, 5], [0, 1, 2, 3, 4, 5], 5)
    assert rep == {"pcc": pytest.approx(1.0), "rd": 0.0, "n": 6,
                   "per_level_histogram": [1, 1, 1, 1, 1, 1], "replication_ratio": pytest.approx(1 / 3)}
    assert eval_report([2, 2, 2], [0, 3, 5], 5)["pcc"] == UNDEFINED
    assert level_histogram([0.4, 4.6, 7, -1], 5) == [2, 0, 0, 0, 0, 2]


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(0.01, 100), b=st.floats(-100, 100))
def test_pcc_affine_invariance(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 20))
    base = pcc(x, y)
    assert pcc(a * x + b, y) == pytest.approx(base, abs=1e-10)
    assert pcc(-a * x + b, y) == pytest.approx(-base, abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 15), st.integers(0, 5)), min_size=1, max_size=30))
def test_rd_bounds_and_s_ge_t(pairs):
    p = np.array([x for x, _ in pairs])
    l = np.array([y for _, y in pairs], dtype=float)
    v = rd(p, l, 5)
    assert 0 <= v <= 1
    S, T = deviations(np.clip(p, 0, 5), l, 5)
    assert np.all(S >= T - 1e-15)
    edge = (l == 0) | (l == 5)
    np.testing.assert_allclose(S[edge], T[edge], atol=1e-15)
    assert (v == 0) == bool(np.all(np.clip(p, 0, 5) == l))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=40))
def test_replication_ratio_monotone_in_threshold(levels):
    ratios = [replication_ratio(levels, t) for t in range(7)]
    assert all(a >= b for a, b in zip(ratios, ratios[1:]))
