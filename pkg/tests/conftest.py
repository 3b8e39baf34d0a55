from pathlib import Path

import numpy as np
import pytest

from rtkge.kg import EntityType, build_graph

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (title, passed); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def star_kg():
    rows = [("hub", "r", f"leaf{i}", 0) for i in range(4)]
    types = {"hub": EntityType.USER, **{f"leaf{i}": EntityType.REPOSITORY for i in range(4)}}
    return build_graph(rows, types)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
