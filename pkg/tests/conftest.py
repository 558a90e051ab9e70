import time

import pytest

_RESULTS = {}


class CriterionLog:
    """Collects one verdict line per acceptance criterion."""

    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.details = []
        self.started = time.perf_counter()

    def note(self, text):
        self.details.append(text)

    @property
    def elapsed(self):
        return time.perf_counter() - self.started


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    log = CriterionLog(*marker.args)
    _RESULTS[log.number] = log
    return log


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call":
        _RESULTS.setdefault(marker.args[0], CriterionLog(*marker.args))
        _RESULTS[marker.args[0]].passed = report.passed


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        log = _RESULTS[number]
        verdict = "PASS" if getattr(log, "passed", False) else "FAIL"
        detail = "; ".join(log.details)
        terminalreporter.write_line(f"criterion {number} [{verdict}] {log.title}: {detail}")
