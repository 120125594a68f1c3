import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gpmmreg.meshcore import Mesh  # noqa: E402
from gpmmreg.expcli.synth import facelike, icosphere, plane, slit_plane  # noqa: E402


def random_surface(n_side=12, seed=0, amp=3.0):
    """Bumpy height-field grid with jittered vertices: a generic open surface."""
    rng = np.random.default_rng(seed)
    base = plane(n_side, 50.0)
    v = base.vertices.copy()
    h = 50.0 / (n_side - 1)
    v[:, :2] += rng.uniform(-0.2, 0.2, (len(v), 2)) * h
    v[:, 2] = amp * np.sin(v[:, 0] / 9.0) * np.cos(v[:, 1] / 7.0) + rng.normal(0, 0.1, len(v))
    return Mesh(v, base.faces)


@pytest.fixture(scope="session")
def face_mesh():
    return facelike()


@pytest.fixture(scope="session")
def slit_mesh():
    return slit_plane()


@pytest.fixture(scope="session")
def small_plane():
    # 200 vertices
    return plane(10, 100.0, ny=20)


@pytest.fixture(scope="session")
def sphere3():
    return icosphere(3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_rank_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="only .* positive eigenvalues")
        yield


ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str):
    """Store and print one acceptance line; also shown in the terminal summary."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
