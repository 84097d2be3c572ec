"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""

import re

import pytest

_DETAILS: dict[int, str] = {}
_OUTCOMES: dict[int, bool] = {}
_NAME = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


@pytest.fixture
def criterion_note():
    """``criterion_note(n, text)`` attaches a measured-value summary to criterion ``n``."""
    def note(n: int, text: str) -> None:
        _DETAILS[n] = text
        print(f"criterion {n}: {text}")
    return note


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed:
        _OUTCOMES[n] = _OUTCOMES.get(n, True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        status = "PASS" if _OUTCOMES[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {_DETAILS.get(n, '')}".rstrip())
