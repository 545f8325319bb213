import numpy as np
import pytest

from streamdp.expfam import ConventionalNiw, to_natural

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def niw2_prior():
    return ConventionalNiw(np.zeros(2), 1e-3, np.eye(2), 4.0)


@pytest.fixture
def base2(niw2_prior):
    return to_natural(niw2_prior)


@pytest.fixture
def base1():
    return to_natural(ConventionalNiw([0.0], 1e-3, [[1.0]], 3.0))


def random_niw(rng, d):
    a = rng.normal(size=(d, d))
    return ConventionalNiw(rng.normal(size=d), rng.uniform(0.1, 5.0), a @ a.T + d * np.eye(d),
                           d - 1 + rng.uniform(0.5, 10.0))
