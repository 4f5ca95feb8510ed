import numpy as np
import pytest

from mvsfs.scene import Camera
from mvsfs.synthetic import make_scene


def simple_camera(f=100.0, c=50.0, size=101, T=None):
    K = np.array([[f, 0, c], [0, f, c], [0, 0, 1]], dtype=np.float64)
    return Camera(K, np.eye(4) if T is None else T, size, size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    """Textured bumpy sphere, 8 views at 128², modest mesh density."""
    return make_scene("bumpy-sphere", views=8, resolution=128, detail=4)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
