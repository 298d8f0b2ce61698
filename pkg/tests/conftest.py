from __future__ import annotations

import pytest

from insurer_control.experiments import solve_all
from insurer_control.model import constant_model, reference_claims, reference_utility, tanh_model
from insurer_control.pde import GridSpec

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def utility():
    return reference_utility()


@pytest.fixture(scope="session")
def claims():
    return reference_claims()


@pytest.fixture(scope="session")
def m0():
    return constant_model()


@pytest.fixture(scope="session")
def m1():
    return tanh_model()


@pytest.fixture(scope="session")
def surf0(m0, claims, utility):
    return solve_all(m0, claims, utility, GridSpec.default(m0, utility))


@pytest.fixture(scope="session")
def surf1(m1, claims, utility):
    return solve_all(m1, claims, utility, GridSpec.default(m1, utility))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
