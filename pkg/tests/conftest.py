import json
import os

import pytest

ORACLE_PATH = os.path.join(os.path.dirname(__file__), "oracles", "derived.json")


@pytest.fixture(scope="session")
def oracles():
    """Frozen reference values produced by tests/oracles/generate.py."""
    with open(ORACLE_PATH, encoding="utf-8") as fh:
        return json.load(fh)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
