"""Collects one pass/fail line per acceptance criterion and prints them after the run."""

import re

import pytest

CRITERIA = range(1, 11)
_details = {}
_outcomes = {}
_NAME = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


@pytest.fixture
def record():
    """``record(n, detail)`` attaches a measured summary to criterion ``n``."""

    def _record(n, detail):
        _details[n] = detail

    return _record


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed:
        if _outcomes.get(n) != "FAIL":
            _outcomes[n] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        status = _outcomes.get(n, "NOT RUN")
        terminalreporter.write_line(f"criterion {n:2d}: {status:7s} {_details.get(n, '')}".rstrip())
