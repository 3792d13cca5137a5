import os

# gradient and oracle checks need double precision; set before the package loads
os.environ.setdefault("CRYOFORGE_PRECISION", "64")
os.environ.setdefault("CRYOFORGE_THREADS", "1")

import numpy as np
import pytest

from cryoforge import diffcore as dc


@pytest.fixture(autouse=True)
def _double_precision():
    with dc.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one summary line per acceptance criterion."""
    def record(number: int, status: str, detail: str) -> None:
        line = f"criterion {number}: {status} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
