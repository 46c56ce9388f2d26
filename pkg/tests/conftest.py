import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from plasticshape import fixtures
from plasticshape.material import MaterialParams

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def params():
    return MaterialParams()


@pytest.fixture(scope="session")
def small_beam():
    return fixtures.beam(cells=(4, 1, 1))


@pytest.fixture(scope="session")
def small_cube():
    return fixtures.cube(cells=2)


# -- acceptance summary --------------------------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:<4} {'PASS' if ok else 'FAIL'}  {detail}")
