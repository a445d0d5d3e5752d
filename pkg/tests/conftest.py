import numpy as np
import pytest

from refmesh.synth import box_mesh, icosphere, merge_meshes, unit_cube


@pytest.fixture
def cube():
    return unit_cube()


@pytest.fixture
def sphere():
    return icosphere(1.0, subdivisions=3)


@pytest.fixture
def two_spheres():
    return merge_meshes([icosphere(0.5, (-1.0, 0, 0), 2), icosphere(0.5, (1.0, 0, 0), 2)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fine_box(divisions=8):
    return box_mesh((1.0, 1.0, 1.0), (0.5, 0.5, 0.5), divisions)


# acceptance criteria report: ``record`` is filled by test_acceptance.py and
# printed once at the end of the session
ACCEPTANCE = {}


def record(criterion, ok, detail=""):
    prev = ACCEPTANCE.get(criterion, (True, ""))
    ACCEPTANCE[criterion] = (prev[0] and bool(ok), "; ".join(x for x in (prev[1], detail) if x))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
