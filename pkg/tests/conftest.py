import numpy as np
import pytest

from agebif.ageprop import Discretization
from agebif.model import holling_tanner_setup, make_model

ACCEPTANCE_LINES = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def neumann_model():
    return make_model("1", "1", "2")


@pytest.fixture(scope="session")
def dirichlet_model():
    return make_model("1", "1", "20", boundary="dirichlet")


@pytest.fixture(scope="session")
def subcrit_model():
    return make_model("1", "1 + z", "2/(1+z)")


@pytest.fixture(scope="session")
def ht_model():
    return holling_tanner_setup(make_model("1", "0", "0.5"))


@pytest.fixture(scope="session")
def neumann_disc(neumann_model):
    return Discretization(neumann_model, 64, 200)


@pytest.fixture
def rng():
    return np.random.default_rng(7)
