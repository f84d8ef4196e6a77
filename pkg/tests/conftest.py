import numpy as np
import pytest

from rdsmanifold.conjugation import ConjugatedSystem
from rdsmanifold.model import SpectralModel, sine_nonlinearity, zero_nonlinearity
from rdsmanifold.perron import PerronConfig
from rdsmanifold.stochastics import TimeGrid, ou_trajectory, sample_wiener, zero_ou

MIX = np.array([[1.0, 0.5, 0.2], [0.3, 1.0, 0.4], [0.1, 0.6, 1.0]])
MIX = MIX / np.linalg.norm(MIX, 2)


def noisy_system(model, F, seed=0, step=0.01, lo=20.0, hi=30.0, truncation=40.0):
    path = sample_wiener(TimeGrid.from_bounds(-(lo + truncation), hi, step), 1, seed)
    ou = ou_trajectory(path, TimeGrid.from_bounds(-lo, hi, step), truncation)
    return ConjugatedSystem(model, F, "multiplicative", ou=ou), path


def quiet_system(model, F, step=0.01, lo=20.0, hi=30.0):
    return ConjugatedSystem(model, F, "multiplicative", ou=zero_ou(TimeGrid.from_bounds(-lo, hi, step)))


@pytest.fixture
def model3():
    return SpectralModel([1.0, -1.0, -2.0], (0,))


@pytest.fixture
def sine3():
    return sine_nonlinearity(3, 0.2, MIX)


@pytest.fixture
def zero3():
    return zero_nonlinearity(3)


@pytest.fixture
def sine_system(model3, sine3):
    return noisy_system(model3, sine3, seed=3)[0]


@pytest.fixture
def pcfg():
    return PerronConfig.for_model(SpectralModel([1.0, -1.0, -2.0], (0,)), 0.0, 0.01)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
