import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scenarios import build_loop_scene  # noqa: E402


@pytest.fixture(scope="session")
def loop_scene():
    """Dense drifted square-loop scenario, built once per test session."""
    return build_loop_scene()


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance pass/fail lines past output capturing."""
    try:
        from test_acceptance import CRITERION_LINES
    except ImportError:
        return
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
