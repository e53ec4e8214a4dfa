"""Shared fixtures plus the acceptance-criteria summary printer."""

import numpy as np
import pytest

# criterion -> outcome, in first-seen order
_ACCEPTANCE_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    criterion = marker.args[0] if marker.args else item.name
    if report.when == "setup" and report.skipped:
        _ACCEPTANCE_RESULTS.setdefault(criterion, "skipped")
    elif report.when == "call":
        # A criterion spread over several tests fails if any test fails.
        previous = _ACCEPTANCE_RESULTS.get(criterion)
        if previous != "failed":
            _ACCEPTANCE_RESULTS[criterion] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion, outcome in _ACCEPTANCE_RESULTS.items():
        status = {"passed": "PASS", "failed": "FAIL",
                  "skipped": "SKIP (prerequisite data unavailable)"}.get(
                      outcome, outcome.upper())
        terminalreporter.write_line(f"[ACCEPTANCE] {criterion}: {status}")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_box(rng, lo=0, hi=40, min_side=1, integer=True):
    """Well-formed random box with sides >= min_side."""
    while True:
        if integer:
            x1, y1 = rng.integers(lo, hi - min_side, size=2)
            x2 = rng.integers(x1 + min_side, hi)
            y2 = rng.integers(y1 + min_side, hi)
        else:
            x1, y1 = rng.uniform(lo, hi - min_side, size=2)
            x2 = rng.uniform(x1 + min_side, hi)
            y2 = rng.uniform(y1 + min_side, hi)
        box = np.array([x1, y1, x2, y2], dtype=np.float64)
        if box[2] > box[0] and box[3] > box[1]:
            return box
