import numpy as np
import pytest

from fuzzydp.cmdp import GridSpec, IndexLine
from fuzzydp.uncertainty import (
    UncertaintyLevels,
    level_value_table,
    level_values,
    perturbation_indices,
    sample_perturbed,
    stream,
)

GRID = GridSpec((-2.5, -2.5), (2.5, 2.5), (11, 11))


def test_scales():
    np.testing.assert_allclose(UncertaintyLevels(3, 0.1).eps, [0.1, 0.2, 0.3])


def test_level_validation():
    with pytest.raises(ValueError):
        UncertaintyLevels(0)
    with pytest.raises(ValueError):
        UncertaintyLevels(3, -0.1)
    with pytest.raises(ValueError):
        UncertaintyLevels(3, 0.1, M=0)


def test_zero_scale_returns_state():
    s = np.array([0.3, -1.2])
    out = sample_perturbed(s, UncertaintyLevels(4, 0.0, 3), stream_id=9)
    assert out.shape == (4, 3, 2)
    assert np.all(out == s)


def test_gaussian_moments():
    levels = UncertaintyLevels(1, 0.1, M=100_000, seed=3)
    d = sample_perturbed(np.zeros(1), levels, stream_id=0)[0, :, 0]
    se = 0.1 / np.sqrt(d.size)
    assert abs(d.mean()) <= 4 * se
    assert abs(d.std() - 0.1) <= 0.001


def test_streams_are_reproducible_and_distinct():
    a = stream(5, 7).standard_normal(10)
    assert np.array_equal(a, stream(5, 7).standard_normal(10))
    assert not np.array_equal(a, stream(5, 8).standard_normal(10))
    assert not np.array_equal(a, stream(6, 7).standard_normal(10))


def test_level_values_examples():
    V = np.arange(GRID.n_cells, dtype=float)
    s = GRID.centers()[60]
    assert np.all(level_values(V, s, UncertaintyLevels(3, 0.0, 4), GRID.snap, 60) == V[60])
    assert np.all(level_values(np.full(GRID.n_cells, 7.0), s, UncertaintyLevels(5, 0.5, 3), GRID.snap, 1) == 7.0)
    one = UncertaintyLevels(2, 0.4, M=1, seed=2)
    idx = GRID.snap(sample_perturbed(s, one, 60))[:, 0]
    np.testing.assert_array_equal(level_values(V, s, one, GRID.snap, 60), V[idx])


def test_indices_match_single_state_draws():
    levels = UncertaintyLevels(3, 0.3, 4, seed=1)
    idx = perturbation_indices(GRID, levels)
    assert idx.shape == (GRID.n_cells, 3, 4)
    for i in (0, 17, 120):
        np.testing.assert_array_equal(idx[i], GRID.snap(sample_perturbed(GRID.centers()[i], levels, i)))


@pytest.mark.parametrize("threads", [2, 3, 8])
def test_indices_do_not_depend_on_threads(threads):
    levels = UncertaintyLevels(4, 0.2, 5, seed=11)
    np.testing.assert_array_equal(perturbation_indices(GRID, levels, 1),
                                  perturbation_indices(GRID, levels, threads))


def test_out_of_grid_samples_clip():
    idx = perturbation_indices(GRID, UncertaintyLevels(2, 50.0, 20, seed=0))
    assert idx.min() >= 0 and idx.max() < GRID.n_cells


def test_index_line_geometry():
    line = IndexLine(4)
    idx = perturbation_indices(line, UncertaintyLevels(2, 0.0, 3))
    assert np.all(idx == np.arange(4)[:, None, None])
    np.testing.assert_array_equal(line.snap(np.array([[-3.0], [1.4], [1.6], [9.0]])), [0, 1, 2, 3])


def test_dispersion_grows_with_level():
    # Lipschitz V: variance of level samples should rise with the noise scale
    V = GRID.centers()[:, 0]
    levels = UncertaintyLevels(4, 0.2, 50, seed=4)
    idx = perturbation_indices(GRID, levels)[40:80]
    var = V[idx].var(axis=-1).mean(axis=0)
    assert np.all(np.diff(var) > 0)


def test_level_value_table():
    V = np.arange(5.0)
    idx = np.array([[[0, 1], [2, 2]]] * 5)
    np.testing.assert_allclose(level_value_table(V, idx), [[0.5, 2.0]] * 5)
