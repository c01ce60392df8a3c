import functools

import numpy as np
import pytest
from hypothesis import settings

from gclkit import simworld

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def default_scenario(seed: int = 0, phi: int = simworld.DEFAULT_PHI):
    """Rendered default scenario: (scenario, central, neighbors, poses)."""
    scene = simworld.generate_scene(seed)
    scen = simworld.sample_neighborhood(scene, simworld.LidarModel(), phi=phi, seed=seed)
    central, neighbors = scen.render()
    return scen, central, neighbors, scen.relative_poses()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
