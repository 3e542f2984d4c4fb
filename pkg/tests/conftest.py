import os

import pytest
from hypothesis import HealthCheck, settings

from twist.cli import compile_source
from twist.corpus import load_source

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile(
    "ci", max_examples=300, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def compile_program():
    def _compile(name: str):
        return compile_source(load_source(name))

    return _compile


@pytest.fixture
def record_criterion():
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def _record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}"
        if detail:
            line += f": {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
