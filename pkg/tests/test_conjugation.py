import math

import numpy as np
import pytest

from rdsmanifold.conjugation import (
    FORWARD,
    INVERSE,
    ConjugatedSystem,
    conjugated_G,
    linear_stationary_solution,
    transform,
)
from rdsmanifold.errors import ConfigurationError, InsufficientPathError
from rdsmanifold.model import SpectralModel, cubic_nonlinearity, sine_nonlinearity
from rdsmanifold.stochastics import TimeGrid, ou_trajectory, sample_wiener

from conftest import noisy_system


def test_transform_roundtrip(model3, sine3):
    sys_, _ = noisy_system(model3, sine3, seed=1)
    x = np.array([0.3, -0.2, 1.1])
    for t in (0.0, 1.5, -3.0):
        y = transform(sys_, t, x, FORWARD)
        np.testing.assert_allclose(transform(sys_, t, y, INVERSE), x, rtol=1e-15)
        assert y == pytest.approx(x * math.exp(-sys_.ou.at(t)))
    with pytest.raises(ConfigurationError):
        transform(sys_, 0.0, x, "sideways")


def test_multiplicative_G_form(model3):
    F = cubic_nonlinearity(3, 0.5)
    sys_, _ = noisy_system(model3, F, seed=2)
    u = np.array([0.2, 0.4, -0.3])
    z = sys_.ou.at(1.0)
    np.testing.assert_allclose(conjugated_G(sys_, 1.0, u), math.exp(-z) * F(math.exp(z) * u))
    flipped = ConjugatedSystem(model3, F, ou=sys_.ou, exponent_sign=+1)
    np.testing.assert_allclose(conjugated_G(flipped, 1.0, u), math.exp(z) * F(math.exp(-z) * u))


def test_G_derivatives_are_consistent(model3, sine3):
    sys_, _ = noisy_system(model3, sine3, seed=2)
    c = sys_.coef(sys_.noise_index(0.5))
    rng = np.random.default_rng(1)
    u, v, w = rng.uniform(-1, 1, (3, 3))
    fd = (sys_.G(u + 1e-6 * v, c) - sys_.G(u - 1e-6 * v, c)) / 2e-6
    np.testing.assert_allclose(sys_.DG(1, u, c, v), fd, atol=1e-8)
    fd2 = (sys_.DG(1, u + 1e-5 * w, c, v) - sys_.DG(1, u - 1e-5 * w, c, v)) / 2e-5
    np.testing.assert_allclose(sys_.DG(2, u, c, v, w), fd2, atol=1e-7)


def test_sine_example_vanishes_at_origin(model3, sine3):
    sys_, _ = noisy_system(model3, sine3, seed=0)
    assert np.all(conjugated_G(sys_, 0.0, np.zeros(3)) == 0.0)


def test_system_requires_noise_data(model3, sine3):
    with pytest.raises(ConfigurationError):
        ConjugatedSystem(model3, sine3, "multiplicative")
    with pytest.raises(ConfigurationError):
        ConjugatedSystem(model3, sine3, "additive")
    with pytest.raises(ConfigurationError):
        ConjugatedSystem(model3, sine3, "cubic")


def test_stationary_solution_matches_direct_integral():
    model = SpectralModel([0.7, -1.2], (0,))
    h, S = 0.01, 40.0
    path = sample_wiener(TimeGrid.from_bounds(-45.0, 48.0, h), 2, seed=3)
    out = TimeGrid.from_bounds(-2.0, 3.0, h)
    ust = linear_stationary_solution(model, path, out, S)
    w = path.values
    i = path.grid.index(1.0)
    m = int(round(S / h))
    # stable mode: sum_k e^{lam (t - s_k)} * exact weight on [s_k, s_k + h]
    lm = -1.2
    dw = np.diff(w[i - m:i + 1, 1])
    s_end = np.arange(-m + 1, 1) * h
    direct = np.sum(np.exp(-lm * s_end) * np.expm1(lm * h) / (lm * h) * dw)
    assert ust.at(1.0)[1] == pytest.approx(direct, rel=1e-10, abs=1e-12)
    # the stationary solution solves du = A u dt + dW over one step exactly
    # for the piecewise-linear path: check the variation-of-constants step
    lp = 0.7
    a, b = ust.at(1.0)[0], ust.at(1.0 + h)[0]
    dwp = w[i + 1, 0] - w[i, 0]
    assert b == pytest.approx(math.exp(lp * h) * a + math.expm1(lp * h) / (lp * h) * dwp, rel=1e-9)


def test_stationary_solution_coverage():
    model = SpectralModel([0.7, -1.2], (0,))
    path = sample_wiener(TimeGrid.from_bounds(-10.0, 10.0, 0.01), 2, seed=3)
    with pytest.raises(InsufficientPathError):
        linear_stationary_solution(model, path, TimeGrid.from_bounds(-1.0, 1.0, 0.01), 40.0)
    with pytest.raises(ConfigurationError):
        linear_stationary_solution(SpectralModel([0.7, -1.2, -2.0], (0,)), path,
                                   TimeGrid.from_bounds(-1.0, 1.0, 0.01), 5.0)
