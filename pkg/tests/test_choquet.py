import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fuzzydp.choquet import (
    choquet_integral,
    choquet_rows,
    dual_choquet_integral,
    dual_choquet_rows,
    max_over_core,
    min_over_core,
)
from fuzzydp.errors import LengthMismatch
from fuzzydp.measure import FuzzyMeasure, core_extreme_points

convex_g = st.lists(st.floats(0.01, 0.45), min_size=2, max_size=5)
values = st.floats(-10, 10, allow_nan=False)


def convex_measure(g):
    m = FuzzyMeasure.from_densities(g)
    return m if m.lam >= 0 else None


@pytest.fixture
def m33():
    return FuzzyMeasure.from_densities([0.3, 0.3])


def test_constant_integrand(m33):
    assert choquet_integral([4.0, 4.0], m33) == pytest.approx(4.0, abs=1e-12)
    assert dual_choquet_integral([4.0, 4.0], m33) == pytest.approx(4.0, abs=1e-12)


def test_additive_is_weighted_mean():
    m = FuzzyMeasure.from_densities([0.6, 0.4])
    assert choquet_integral([3.0, 1.0], m) == pytest.approx(2.2, abs=1e-12)
    assert dual_choquet_integral([3.0, 1.0], m) == pytest.approx(2.2, abs=1e-12)


def test_k2_nonadditive_examples(m33):
    assert choquet_integral([1.0, 0.0], m33) == pytest.approx(0.3, abs=1e-12)
    assert dual_choquet_integral([1.0, 0.0], m33) == pytest.approx(0.7, abs=1e-12)
    assert min_over_core([1.0, 0.0], m33) == pytest.approx(0.3, abs=1e-12)
    assert max_over_core([1.0, 0.0], m33) == pytest.approx(0.7, abs=1e-12)


def test_tail_set_mode_differs(m33):
    # tail-set capacities with a descending sort land on the dual value
    assert choquet_integral([1.0, 0.0], m33, mode="tail-set") == pytest.approx(0.7, abs=1e-12)
    with pytest.raises(ValueError):
        choquet_integral([1.0, 0.0], m33, mode="other")


def test_zero_function(m33):
    assert min_over_core([0.0, 0.0], m33) == 0.0
    assert max_over_core([0.0, 0.0], m33) == 0.0


def test_additive_core_is_expectation():
    g = np.array([0.1, 0.2, 0.7])
    m = FuzzyMeasure.from_densities(g)
    f = np.array([2.0, -1.0, 5.0])
    assert min_over_core(f, m) == pytest.approx(g @ f, abs=1e-12)
    assert max_over_core(f, m) == pytest.approx(g @ f, abs=1e-12)


def test_length_mismatch(m33):
    with pytest.raises(LengthMismatch):
        choquet_integral([1.0, 2.0, 3.0], m33)


@settings(max_examples=150, deadline=None)
@given(convex_g, st.data())
def test_core_sandwich(g, data):
    m = convex_measure(g)
    if m is None:
        return
    f = np.array(data.draw(st.lists(values, min_size=m.K, max_size=m.K)))
    lo = choquet_integral(f, m)
    hi = dual_choquet_integral(f, m)
    assert lo == pytest.approx(min_over_core(f, m), abs=1e-9)
    assert hi == pytest.approx(max_over_core(f, m), abs=1e-9)
    for P in core_extreme_points(m).points:
        assert lo - 1e-9 <= P @ f <= hi + 1e-9


@settings(max_examples=100, deadline=None)
@given(convex_g, st.data())
def test_monotone_homogeneous_translation(g, data):
    m = FuzzyMeasure.from_densities(g)
    K = m.K
    f = np.array(data.draw(st.lists(values, min_size=K, max_size=K)))
    bump = np.array(data.draw(st.lists(st.floats(0, 5), min_size=K, max_size=K)))
    c = data.draw(st.floats(0, 10))
    base = choquet_integral(f, m)
    assert choquet_integral(f + bump, m) >= base - 1e-12
    assert choquet_integral(c * f, m) == pytest.approx(c * base, abs=1e-12 * max(1, abs(c * base)) + 1e-11)
    assert choquet_integral(f + c, m) == pytest.approx(base + c, abs=1e-11)


@settings(max_examples=100, deadline=None)
@given(convex_g, st.data())
def test_comonotonic_additivity(g, data):
    m = FuzzyMeasure.from_densities(g)
    K = m.K
    order = np.array(data.draw(st.permutations(range(K))))
    f = np.empty(K)
    h = np.empty(K)
    f[order] = np.sort(data.draw(arrays(float, K, elements=st.floats(-5, 5), unique=True)))
    h[order] = np.sort(data.draw(arrays(float, K, elements=st.floats(-5, 5), unique=True)))
    lhs = choquet_integral(f + h, m)
    assert lhs == pytest.approx(choquet_integral(f, m) + choquet_integral(h, m), abs=1e-12 * 20)


def test_rows_match_scalar(rng):
    for _ in range(30):
        K = int(rng.integers(1, 7))
        g = rng.uniform(0.02, 0.6, K) if K > 1 else np.array([0.5])
        m = FuzzyMeasure.from_densities(g)
        F = rng.normal(size=(4, 3, K))
        F[0, 0] = 2.5  # constant row
        got = choquet_rows(F, np.asarray(m.g), m.lam)
        dual = dual_choquet_rows(F, np.asarray(m.g), m.lam)
        for idx in np.ndindex(4, 3):
            assert got[idx] == pytest.approx(choquet_integral(F[idx], m), abs=1e-12)
            assert dual[idx] == pytest.approx(dual_choquet_integral(F[idx], m), abs=1e-12)
        assert got[0, 0] == 2.5 and dual[0, 0] == 2.5


def test_rows_per_row_measures(rng):
    G = rng.uniform(0.05, 0.5, (6, 3))
    measures = [FuzzyMeasure.from_densities(row) for row in G]
    lam = np.array([m.lam for m in measures])
    F = rng.normal(size=(6, 3))
    got = choquet_rows(F, G, lam)
    dual = dual_choquet_rows(F, G, lam)
    for i, m in enumerate(measures):
        assert got[i] == pytest.approx(choquet_integral(F[i], m), abs=1e-12)
        assert dual[i] == pytest.approx(dual_choquet_integral(F[i], m), abs=1e-12)


def test_ties_do_not_change_value(m33):
    m = FuzzyMeasure.from_densities([0.2, 0.3, 0.1])
    f = np.array([1.0, 1.0, 0.0])
    assert choquet_integral(f, m) == pytest.approx(min_over_core(f, m), abs=1e-12)
