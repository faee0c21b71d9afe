from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def s2_reference():
    """Pinned cell geometry sample generated with an independent library."""
    with open(DATA_DIR / "s2_reference_sample.json") as fh:
        return json.load(fh)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdict lines past output capture."""
    module = sys.modules.get("test_acceptance") \
        or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "_REPORTED", None) if module else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
