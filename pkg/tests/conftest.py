import numpy as np
import pytest

from spolab.core import LogProbTable


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_table(rng, n_prompts=3, n_responses=4, scale=1.0):
    return LogProbTable.from_logits(scale * rng.standard_normal((n_prompts, n_responses)))


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion and print it in the session summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
