import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdsmanifold.errors import AlignmentError, ConfigurationError, InsufficientPathError
from rdsmanifold.stochastics import (
    TimeGrid,
    birkhoff_average,
    cumulative_integral,
    ou_residual,
    ou_trajectory,
    ou_value,
    path_from_function,
    sample_wiener,
    shift,
    subsample,
    zero_ou,
)


def test_grid_basics():
    g = TimeGrid.from_bounds(-1.0, 2.0, 0.25)
    assert (g.i_min, g.i_max, g.size) == (-4, 8, 13)
    assert g.times[g.zero_index] == 0.0
    assert g.index(0.5) == 6
    with pytest.raises(AlignmentError):
        g.index(0.3)
    with pytest.raises(InsufficientPathError):
        g.index(2.25)
    with pytest.raises(ConfigurationError):
        TimeGrid.from_bounds(-1.0, 1.1, 0.25)
    with pytest.raises(ConfigurationError):
        TimeGrid.from_bounds(0.5, 1.0, 0.25)


def test_wiener_pinned_and_deterministic():
    g = TimeGrid.from_bounds(-2.0, 3.0, 0.01)
    a = sample_wiener(g, 2, seed=5)
    b = sample_wiener(g, 2, seed=5)
    assert np.array_equal(a.values, b.values)
    assert np.all(a.at(0.0) == 0.0)
    assert not np.array_equal(a.values, sample_wiener(g, 2, seed=6).values)


def test_wiener_values_independent_of_extent():
    small = sample_wiener(TimeGrid.from_bounds(-1.0, 1.0, 0.01), 1, seed=2)
    big = sample_wiener(TimeGrid.from_bounds(-4.0, 7.0, 0.01), 1, seed=2)
    lo = big.grid.index(-1.0)
    assert np.array_equal(big.values[lo:lo + small.grid.size], small.values)


def test_increment_moments_over_many_seeds():
    h = 0.01
    g = TimeGrid.from_bounds(-0.05, 0.05, h)
    incs = np.concatenate([np.diff(sample_wiener(g, 1, s).values[:, 0]) for s in range(10_000)])
    m = incs.size
    se_mean = math.sqrt(h / m)
    assert abs(incs.mean()) < 4 * se_mean
    # var of the sample variance of N(0, h) is 2 h^2 / m
    assert abs(incs.var() - h) < 4 * math.sqrt(2.0 / m) * h


@settings(max_examples=30, deadline=None)
@given(a=st.integers(-150, 150), b=st.integers(-150, 150), seed=st.integers(0, 1000))
def test_shift_flow_identity_is_exact(a, b, seed):
    h = 0.01
    w = sample_wiener(TimeGrid.from_bounds(-4.0, 4.0, h), 1, seed)
    two = shift(shift(w, a * h), b * h)
    one = shift(w, (a + b) * h)
    assert two.grid == one.grid
    assert np.array_equal(two.values, one.values)
    assert np.all(one.at(0.0) == 0.0)


def test_shift_rejects_leaving_window():
    w = sample_wiener(TimeGrid.from_bounds(-1.0, 1.0, 0.1), 1, 0)
    with pytest.raises(InsufficientPathError):
        shift(w, 1.5)
    with pytest.raises(InsufficientPathError):
        shift(w, 0.5, window=(-0.5, 1.0))


def test_ou_value_closed_forms():
    S = 40.0
    g = TimeGrid.from_bounds(-S, 0.0, 1e-3)
    assert ou_value(path_from_function(g, lambda t: 0 * t), S) == 0.0
    lin = ou_value(path_from_function(g, lambda t: t), S)
    assert lin == pytest.approx(1 - math.exp(-S) * (S + 1), abs=1e-6)
    expo = ou_value(path_from_function(g, np.exp), S)
    assert expo == pytest.approx(-(1 - math.exp(-2 * S)) / 2, abs=1e-6)


def test_ou_value_needs_coverage():
    w = sample_wiener(TimeGrid.from_bounds(-10.0, 1.0, 0.01), 1, 0)
    with pytest.raises(InsufficientPathError):
        ou_value(w, 40.0)
    z, bound = ou_value(w, 5.0, return_bound=True)
    assert bound > 0 and math.isfinite(z)


def test_ou_trajectory_matches_pointwise_values():
    h = 0.01
    w = sample_wiener(TimeGrid.from_bounds(-45.0, 5.0, h), 1, seed=11)
    ou = ou_trajectory(w, TimeGrid.from_bounds(-2.0, 5.0, h), 40.0)
    for t in (-2.0, 0.0, 1.37, 5.0):
        direct = ou_value(shift(w, t), 40.0)
        assert abs(ou.at(t) - direct) <= 2 * ou.quadrature_error_bound


def test_ou_residual_second_order():
    w = sample_wiener(TimeGrid.from_bounds(-48.0, 8.0, 0.004), 1, seed=4)
    res = []
    for f in (4, 2, 1):
        p = subsample(w, f)
        ou = ou_trajectory(p, TimeGrid.from_bounds(-8.0, 8.0, p.grid.step), 40.0)
        res.append(np.max(np.abs(ou_residual(ou, p))))
    assert res[0] / res[1] > 3.0 and res[1] / res[2] > 3.0


def test_zero_ou_and_birkhoff():
    g = TimeGrid.from_bounds(-1.0, 10.0, 0.1)
    z = zero_ou(g)
    assert birkhoff_average(z, 10.0) == 0.0
    with pytest.raises(ConfigurationError):
        birkhoff_average(z, 0.0)


def test_cumulative_integral_exact_for_linear():
    t = np.linspace(0, 2, 21)
    np.testing.assert_allclose(cumulative_integral(t, 0.1), t ** 2 / 2, atol=1e-14)


def test_subsample_and_csv(tmp_path):
    w = sample_wiener(TimeGrid.from_bounds(-1.0, 1.0, 0.05), 2, seed=1)
    c = subsample(w, 4)
    assert c.grid.step == pytest.approx(0.2)
    assert np.array_equal(c.values, w.values[::4])
    with pytest.raises(AlignmentError):
        subsample(w, 3)
    fname = tmp_path / "w.csv"
    w.to_csv(fname)
    rows = list(csv.reader(open(fname)))
    assert rows[0] == ["t", "channel_0", "channel_1"]
    assert float(rows[1 + w.grid.zero_index][0]) == 0.0
