import math

import numpy as np
import pytest

from bevloc.geometry import Se2Pose
from bevloc.harness import SolverConfig, generate_scene, render_pair


@pytest.fixture(scope="session")
def scene():
    return generate_scene(11)


@pytest.fixture(scope="session")
def pair_factory(scene):
    """Solver-resolution (obs, ref) for a chosen correction on the shared scene."""
    config = SolverConfig()
    gt = Se2Pose(1.0, 0.2, math.radians(0.5))

    def make(correction):
        return render_pair(scene, gt, correction, config)

    return make


def random_grid(rng, h=40, w=24, c=4):
    return rng.random((h, w, c))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
