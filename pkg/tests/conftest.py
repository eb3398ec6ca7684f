import numpy as np
import pytest

from antkit.ingest import split
from antkit.synth import generate_flows

# Lines recorded by the acceptance suite, echoed in the terminal summary so
# they show up even when output capture is on.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_flows():
    return generate_flows(40, seed=3, packets=(8, 16))


@pytest.fixture(scope="session")
def small_split(small_flows):
    return split(small_flows, [f.label for f in small_flows], seed=1,
                 class_labels=["chat", "file_transfer", "streaming", "voip"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    """Append ``"C<n> PASS|FAIL ..."`` lines; they are printed after the run."""
    return ACCEPTANCE_LINES
