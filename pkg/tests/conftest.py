import numpy as np
import pytest
import torch

from collab_retarget.fixtures import MESH_SPACING, SOURCE_SIZE
from collab_retarget.motion import generate_toy_scene
from collab_retarget.shapes import box_mesh, icosphere

torch.set_num_threads(1)

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one acceptance line: call with (name, passed, detail)."""
    def record(name, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        request.config.stash[_ACCEPTANCE_KEY].append(line)
        print(line)
        return passed
    return record


@pytest.fixture(scope="session")
def unit_cube():
    return box_mesh((1.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def sphere():
    return icosphere(1.0, subdivisions=3)


@pytest.fixture(scope="session")
def source_box():
    return box_mesh(SOURCE_SIZE, spacing=MESH_SPACING)


@pytest.fixture(scope="session")
def carry(source_box):
    return generate_toy_scene("carry", 30, source_box, seed=0)


@pytest.fixture(scope="session")
def handover(source_box):
    return generate_toy_scene("handover", 30, source_box, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
