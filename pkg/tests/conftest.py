import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sectx.scenarios import load_scenario  # noqa: E402

ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def hospital_secure():
    return load_scenario("hospital_secure")


@pytest.fixture(scope="session")
def hospital_insecure():
    return load_scenario("hospital_insecure")


@pytest.fixture(scope="session")
def blog():
    return load_scenario("blog")


@pytest.fixture(scope="session")
def rainforest():
    return load_scenario("rainforest")


@pytest.fixture(scope="session")
def cloud_wall():
    return load_scenario("cloud_wall")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
