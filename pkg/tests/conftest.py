from pathlib import Path

import pytest

from eaglecam.mission import run_mission
from eaglecam.scenario import default_scenario

DATA = Path(__file__).parent / "data"
ROOT = Path(__file__).parent.parent


@pytest.fixture(scope="session")
def nominal_mission():
    """One full default run shared by the read-only end-to-end checks."""
    return run_mission(default_scenario())


@pytest.fixture(scope="session")
def lossless_mission():
    return run_mission(default_scenario(links__wifi__loss=0.0))


def pytest_terminal_summary(terminalreporter):
    from harness import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
