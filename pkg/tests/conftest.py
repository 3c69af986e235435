import numpy as np
import pytest

from consistent_diffusion.drift import default_gmm_2d
from consistent_diffusion.gmm import GaussianMixture


def mixture_1d():
    return GaussianMixture(np.array([0.3, 0.7]), np.array([[-1.0], [2.0]]), np.array([0.25, 0.5]))


def mixture_3d():
    return GaussianMixture(
        np.array([0.5, 0.25, 0.25]),
        np.array([[0.0, 1.0, -1.0], [2.0, -2.0, 0.5], [-3.0, 0.0, 1.0]]),
        np.array([1.0, 0.1, 0.5]),
    )


MIXTURES = {"1d": mixture_1d, "2d": default_gmm_2d, "3d": mixture_3d}


@pytest.fixture(params=sorted(MIXTURES))
def gmm(request):
    return MIXTURES[request.param]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
