from importlib import resources
from pathlib import Path

import pytest

from gridcascade.netmodel import load_case

DATA = Path(str(resources.files("gridcascade") / "data"))
SCENARIOS = DATA / "scenarios"
TEST_DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def ieee39():
    return load_case(DATA / "ieee39.case")


@pytest.fixture(scope="session")
def toy3():
    return load_case(DATA / "toy3.case")


@pytest.fixture(scope="session")
def star5():
    return load_case(DATA / "star5.case")


@pytest.fixture(scope="session")
def pocket():
    return load_case(DATA / "pocket.case")


# one line per acceptance criterion, shown at the end of every run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
